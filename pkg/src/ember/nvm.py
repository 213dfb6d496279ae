"""Simulated device memory: FRAM-like NVM, volatile SRAM, and the progress slots.

NVM is an array of 16-bit words.  A single word write is atomic; anything
larger is not.  Progress records therefore go through two alternating slots:
a commit writes every word of the *inactive* slot and writes that slot's
generation word last, so a power failure at any point leaves the previously
committed record intact in the other slot.

Generations are compared on their low 16 bits with wrap-around: a complete
slot is exactly one ahead of its partner, and a torn slot still carries its
old generation word, which is one *behind*.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ember.errors import NvmCapacityError, PowerFailure, UnrecoverableStateError

WORD_BYTES = 2
DEFAULT_NVM_BYTES = 256 * 1024
DEFAULT_SRAM_BYTES = 8 * 1024
NO_PENDING = 0xFFFFFFFF

SLOT_A = "progress_slot_A"
SLOT_B = "progress_slot_B"


@dataclass
class ProgressRecord:
    """Persisted intermittence state.

    ``L`` is the layer to execute next; ``(I, W, O)`` locate the next step
    inside that layer's loop nest.  ``acc`` carries a partial sum at MAC
    granularity.  ``pending_addr``/``pending_value`` is an output word that
    travels with the index advance and is (re)applied after every load.
    """

    L: int = 0
    I: int = 0
    W: int = 0
    O: int = 0
    acc: int = 0
    generation: int = 0
    pending_addr: int = NO_PENDING
    pending_value: int = 0
    mode: int = 0

    def to_words(self) -> list:
        acc = self.acc & 0xFFFFFFFF
        gen = self.generation & 0xFFFFFFFF
        return [
            self.L & 0xFFFF,
            self.O & 0xFFFF, (self.O >> 16) & 0xFFFF,
            self.W & 0xFFFF, (self.W >> 16) & 0xFFFF,
            self.I & 0xFFFF, (self.I >> 16) & 0xFFFF,
            acc & 0xFFFF, acc >> 16,
            self.pending_value & 0xFFFF,
            self.pending_addr & 0xFFFF, (self.pending_addr >> 16) & 0xFFFF,
            self.mode & 0xFFFF,
            gen >> 16,
            gen & 0xFFFF,  # commit word: must stay last
        ]

    @classmethod
    def from_words(cls, words) -> "ProgressRecord":
        w = [v & 0xFFFF for v in words]
        acc = w[7] | (w[8] << 16)
        if acc >= 1 << 31:
            acc -= 1 << 32
        pv = w[9] - 0x10000 if w[9] >= 0x8000 else w[9]
        return cls(
            L=w[0],
            O=w[1] | (w[2] << 16),
            W=w[3] | (w[4] << 16),
            I=w[5] | (w[6] << 16),
            acc=acc,
            pending_value=pv,
            pending_addr=w[10] | (w[11] << 16),
            mode=w[12],
            generation=(w[13] << 16) | w[14],
        )

    @property
    def has_pending(self) -> bool:
        return self.pending_addr != NO_PENDING

    def position(self) -> tuple:
        return (self.L, self.O, self.W)

    def same_state(self, other: "ProgressRecord") -> bool:
        return all(getattr(self, f.name) == getattr(other, f.name) for f in fields(self))


RECORD_WORDS = len(ProgressRecord().to_words())


@dataclass
class Segment:
    name: str
    start: int
    size: int

    @property
    def end(self) -> int:
        return self.start + self.size

    def __contains__(self, addr) -> bool:
        return self.start <= addr < self.end


def _to_word(value: int) -> int:
    value = int(value)
    if value < -0x8000 or value > 0xFFFF:
        raise ValueError(f"{value} does not fit in a 16-bit word")
    return value - 0x10000 if value > 0x7FFF else value


class NvmImage:
    """Word-addressed non-volatile memory with access counters and fault injection.

    Words are held as signed 16-bit integers.  ``fail_at_write`` arms a
    one-shot power failure: the write attempt with that ordinal does not land
    and :class:`PowerFailure` is raised instead.
    """

    def __init__(self, capacity_bytes: int = DEFAULT_NVM_BYTES):
        self.capacity_words = capacity_bytes // WORD_BYTES
        self.words = [0] * self.capacity_words
        self.segments: dict = {}
        self._next = 0
        self.reads = 0
        self.writes = 0
        self.write_attempts = 0
        self.fail_at_write: Optional[int] = None
        self.kill_at_write: Optional[int] = None
        self.write_log: Optional[list] = None
        self.commit_log: Optional[list] = None
        self.validator: Optional[Callable[[ProgressRecord], bool]] = None
        self.active_slot: Optional[str] = None
        self.last_generation = 0
        self.last_committed: Optional[ProgressRecord] = None
        self.tag = None

    # -- layout ------------------------------------------------------------
    def allocate(self, name: str, n_words: int) -> Segment:
        if name in self.segments:
            raise ValueError(f"segment {name!r} already allocated")
        if self._next + n_words > self.capacity_words:
            raise NvmCapacityError(
                f"segment {name!r} ({n_words} words) overflows NVM: "
                f"{self._next} of {self.capacity_words} words already used"
            )
        seg = Segment(name, self._next, n_words)
        self.segments[name] = seg
        self._next += n_words
        return seg

    def segment(self, name: str) -> Segment:
        return self.segments[name]

    @property
    def used_words(self) -> int:
        return self._next

    # -- access ------------------------------------------------------------
    def read(self, addr: int) -> int:
        self.reads += 1
        return self.words[addr]

    def read_block(self, addr: int, n: int) -> list:
        self.reads += n
        return self.words[addr:addr + n]

    def write(self, addr: int, value: int):
        ordinal = self.write_attempts
        self.write_attempts = ordinal + 1
        if ordinal == self.fail_at_write:
            self.fail_at_write = None
            raise PowerFailure(f"power lost before write #{ordinal}")
        if ordinal == self.kill_at_write:
            self.kill_at_write = None
            raise SimulationKilled(ordinal)
        self.words[addr] = _to_word(value)
        self.writes += 1
        if self.write_log is not None:
            self.write_log.append((ordinal, addr))

    def write_block(self, addr: int, values):
        """Word-by-word write of ``values``; each word is its own failure point."""
        n = len(values)
        first = self.write_attempts
        armed = [o for o in (self.fail_at_write, self.kill_at_write) if o is not None and first <= o < first + n]
        if armed or self.write_log is not None:
            for i, v in enumerate(values):
                self.write(addr + i, v)
            return
        self.words[addr:addr + n] = [_to_word(v) for v in values]
        self.write_attempts = first + n
        self.writes += n

    def program(self, addr: int, values):
        """Load contents out of band (device programming); not counted."""
        vals = [_to_word(v) for v in np.asarray(values, dtype=np.int64).tolist()]
        self.words[addr:addr + len(vals)] = vals

    # -- progress slots ----------------------------------------------------
    def format_progress(self, record: Optional[ProgressRecord] = None):
        """Initialize both slots to the same generation-0 record (slot A wins ties)."""
        for name in (SLOT_A, SLOT_B):
            if name not in self.segments:
                self.allocate(name, RECORD_WORDS)
        record = record or ProgressRecord()
        words = record.to_words()
        self.program(self.segments[SLOT_A].start, words)
        self.program(self.segments[SLOT_B].start, words)
        self.active_slot = SLOT_A
        self.last_generation = record.generation
        self.last_committed = record

    def commit_progress(self, record: ProgressRecord) -> int:
        if record.generation != self.last_generation + 1:
            raise ValueError(
                f"commit generation {record.generation} must follow {self.last_generation}"
            )
        target = SLOT_B if self.active_slot == SLOT_A else SLOT_A
        self.write_block(self.segments[target].start, record.to_words())
        self.active_slot = target
        self.last_generation = record.generation
        self.last_committed = record
        if self.commit_log is not None:
            self.commit_log.append((self.write_attempts - 1, record))
        return record.generation

    def _slot(self, name) -> ProgressRecord:
        seg = self.segments[name]
        return ProgressRecord.from_words(self.read_block(seg.start, seg.size))

    def load_progress(self) -> ProgressRecord:
        a, b = self._slot(SLOT_A), self._slot(SLOT_B)
        ga, gb = a.generation & 0xFFFF, b.generation & 0xFFFF
        if gb == (ga + 1) & 0xFFFF:
            order = [(SLOT_B, b), (SLOT_A, a)]
        elif ga == (gb + 1) & 0xFFFF or ga == gb:
            order = [(SLOT_A, a), (SLOT_B, b)]
        else:
            raise UnrecoverableStateError(f"slot generations {ga} and {gb} are not adjacent")
        for name, rec in order:
            if self.validator is None or self.validator(rec):
                self.active_slot = name
                self.last_generation = rec.generation
                self.last_committed = rec
                return rec
        raise UnrecoverableStateError("neither progress slot holds a consistent record")

    # -- persistence -------------------------------------------------------
    def dump(self, path):
        np.asarray(self.words, dtype="<i2").tofile(Path(path))

    @classmethod
    def from_dump(cls, path, segments: Optional[dict] = None) -> "NvmImage":
        raw = np.fromfile(Path(path), dtype="<i2")
        img = cls(raw.size * WORD_BYTES)
        img.words = raw.astype(np.int64).tolist()
        for name, (start, size) in (segments or {}).items():
            img.segments[name] = Segment(name, start, size)
            img._next = max(img._next, start + size)
        return img

    def layout(self) -> dict:
        return {name: (s.start, s.size) for name, s in self.segments.items()}


class SimulationKilled(Exception):
    """The whole simulation was stopped at a write ordinal (not a power failure)."""

    def __init__(self, ordinal):
        super().__init__(f"simulation killed before write #{ordinal}")
        self.ordinal = ordinal


@dataclass
class VolatileImage:
    """SRAM scratch space; every power failure resets it to all zeros."""

    capacity_bytes: int = DEFAULT_SRAM_BYTES
    words: list = field(default_factory=list)
    reads: int = 0
    writes: int = 0

    def __post_init__(self):
        self.words = [0] * (self.capacity_bytes // WORD_BYTES)

    def read(self, addr: int) -> int:
        self.reads += 1
        return self.words[addr]

    def write(self, addr: int, value: int):
        self.writes += 1
        self.words[addr] = int(value)

    def store(self, addr: int, values):
        values = list(values)
        if addr + len(values) > len(self.words):
            raise NvmCapacityError(
                f"{len(values)} words at {addr} exceed {self.capacity_bytes} bytes of SRAM"
            )
        self.writes += len(values)
        self.words[addr:addr + len(values)] = values

    def clear(self):
        self.words = [0] * len(self.words)
