"""Capacitor energy model, harvest traces, per-operation costs, and the admission gate.

Units: energies in nanojoules, power in microwatts, time in microseconds
(so power x time is picojoules; divide by 1000 for nJ), capacitance in farads.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ember.errors import TraceParameterError
from ember.model import LayerKind, LayerSpec, InferenceMode, LoopGeometry

CLOCK_MHZ = 16.0
NJ_PER_J = 1e9


@dataclass(frozen=True)
class CostModel:
    """Per-operation energy (nJ) and cycle prices."""

    mac: float = 1.0
    volatile: float = 0.2
    nvm_read: float = 1.0
    nvm_write: float = 2.0
    commit: float = 4.0
    transition: float = 8.0
    mac_cycles: int = 2
    volatile_cycles: int = 1
    nvm_read_cycles: int = 1
    nvm_write_cycles: int = 1
    commit_cycles: int = 8
    transition_cycles: int = 8

    def __post_init__(self):
        energies = (self.mac, self.volatile, self.nvm_read, self.nvm_write, self.commit, self.transition)
        if min(energies) <= 0:
            raise ValueError("all operation costs must be positive")
        if self.nvm_write < self.nvm_read:
            raise ValueError("an NVM write may not be cheaper than a read")

    def scaled(self, factor: float) -> "CostModel":
        return dataclasses.replace(
            self,
            mac=self.mac * factor, volatile=self.volatile * factor,
            nvm_read=self.nvm_read * factor, nvm_write=self.nvm_write * factor,
            commit=self.commit * factor, transition=self.transition * factor,
        )

    @classmethod
    def from_mapping(cls, values: dict) -> "CostModel":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - names
        if unknown:
            raise ValueError(f"unknown cost fields: {sorted(unknown)}")
        return cls(**values)


@dataclass
class OpCounts:
    macs: int = 0
    nvm_reads: int = 0
    nvm_writes: int = 0
    commits: int = 0
    volatile: int = 0
    transitions: int = 0

    def energy(self, cost: CostModel) -> float:
        return (
            self.macs * cost.mac + self.nvm_reads * cost.nvm_read + self.nvm_writes * cost.nvm_write
            + self.commits * cost.commit + self.volatile * cost.volatile
            + self.transitions * cost.transition
        )

    def cycles(self, cost: CostModel) -> int:
        return (
            self.macs * cost.mac_cycles + self.nvm_reads * cost.nvm_read_cycles
            + self.nvm_writes * cost.nvm_write_cycles + self.commits * cost.commit_cycles
            + self.volatile * cost.volatile_cycles + self.transitions * cost.transition_cycles
        )

    def add(self, other: "OpCounts"):
        for f in dataclasses.fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))


@dataclass(frozen=True)
class SectionEstimate:
    e_req: float
    unit: str
    ops: OpCounts = field(default_factory=OpCounts, compare=False)


UNIT_KINDS = ("mac", "output_element", "output_row", "transition", "boot")


def estimate_section(
    unit: str,
    layer: LayerSpec,
    cost: CostModel,
    mode: InferenceMode = InferenceMode.FULL,
    geometry: Optional[LoopGeometry] = None,
    record_words: int = 15,
) -> SectionEstimate:
    """Static worst-case energy of one atomic unit of ``layer``.

    A MAC-layer output element costs reduction x (2 NVM reads + 1 MAC) plus
    one output write and one progress commit; under low-energy mode the
    reduction is the largest per-output count of mask-active weights.
    ``geometry`` is needed for output rows and pooling/ReLU layers.
    """
    if unit not in UNIT_KINDS:
        raise ValueError(f"unknown unit kind {unit!r}")
    ops = OpCounts()
    if unit == "boot":
        # both progress slots read, pending output word re-applied
        ops.nvm_reads, ops.nvm_writes = 2 * record_words, 1
        return SectionEstimate(ops.energy(cost), unit, ops)
    if unit == "transition":
        # layer entry: biases (two words each) cached in SRAM
        ops.transitions = 1
        if layer.kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
            ops.nvm_reads = 2 * layer.dims[0]
            ops.volatile = layer.dims[0]
        return SectionEstimate(ops.energy(cost), unit, ops)

    if layer.kind in (LayerKind.CONV2D, LayerKind.FULLY_CONNECTED):
        mask = layer.effective_mask(mode)
        if mask is None:
            per_out = layer.weight_count // layer.dims[0]
        else:
            per_out = int(mask.reshape(layer.dims[0], -1).sum(axis=1).max())
        if unit == "mac":
            ops.nvm_reads, ops.macs = 2, 1
        else:
            ops.nvm_reads, ops.macs = 2 * per_out, per_out
    elif layer.kind == LayerKind.MAXPOOL:
        window = int(np.prod(layer.dims))
        ops.nvm_reads, ops.volatile = window, window
    else:
        ops.nvm_reads = 1
    ops.nvm_writes = 1
    ops.commits = 1
    if unit == "output_row":
        if geometry is None:
            raise ValueError("output_row estimates need the layer geometry")
        n = geometry.row_length()
        ops = OpCounts(ops.macs * n, ops.nvm_reads * n, n, 1, ops.volatile * n, 0)
    return SectionEstimate(ops.energy(cost), unit, ops)


def gate(state: "EnergyState", estimate) -> bool:
    """Admit a critical section only if available energy strictly exceeds its need."""
    e_req = estimate.e_req if isinstance(estimate, SectionEstimate) else float(estimate)
    return state.available() > e_req


# --------------------------------------------------------------------------
# capacitor


@dataclass
class EnergyState:
    capacitance: float = 100e-6
    voltage: float = 0.0
    v_on: float = 2.8
    v_off: float = 1.8
    v_max: float = 3.6
    time: float = 0.0
    on: bool = False

    def __post_init__(self):
        if not (self.v_off < self.v_on <= self.v_max):
            raise ValueError(f"need v_off < v_on <= v_max, got {self.v_off}, {self.v_on}, {self.v_max}")
        if self.capacitance <= 0:
            raise ValueError("capacitance must be positive")

    def energy_at(self, volts: float) -> float:
        return 0.5 * self.capacitance * volts * volts * NJ_PER_J

    @property
    def stored(self) -> float:
        return self.energy_at(self.voltage)

    def available(self) -> float:
        """E_av: energy above the brown-out threshold (zero while off)."""
        if not self.on:
            return 0.0
        return max(0.0, self.stored - self.energy_at(self.v_off))

    def window(self) -> float:
        """Energy one full discharge from v_on to v_off delivers."""
        return self.energy_at(self.v_on) - self.energy_at(self.v_off)

    def voltage_for(self, energy_nj: float) -> float:
        return math.sqrt(max(0.0, 2.0 * energy_nj / NJ_PER_J / self.capacitance))


@dataclass
class AdvanceEvents:
    power_failure: bool = False
    power_restore: bool = False
    harvested: float = 0.0
    consumed: float = 0.0
    wasted: float = 0.0

    def __iter__(self):
        if self.power_failure:
            yield "PowerFailure"
        if self.power_restore:
            yield "PowerRestore"


def advance(state: EnergyState, trace: "PowerTrace", consumed: float, dt: float):
    """Integrate ``dt`` microseconds of harvest against ``consumed`` nJ of load.

    Returns ``(new_state, events)``.  Stored energy is capped at v_max (the
    surplus is reported as wasted) and never drops below the v_off level
    while on; a shortfall clamps to v_off and raises a PowerFailure event.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    ev = AdvanceEvents()
    ev.harvested = trace.energy(state.time, state.time + dt)
    e = state.stored + ev.harvested
    e_max = state.energy_at(state.v_max)
    floor = state.energy_at(state.v_off) if state.on else 0.0
    if consumed > e - floor:
        ev.consumed = max(0.0, e - floor)
        e = floor
        ev.power_failure = state.on
        on = False
    else:
        ev.consumed = consumed
        e -= consumed
        on = state.on
    if e > e_max:
        ev.wasted = e - e_max
        e = e_max
    new = dataclasses.replace(state, voltage=state.voltage_for(e), time=state.time + dt, on=on)
    if on and new.voltage < new.v_off:
        new.on = False
        ev.power_failure = True
    if not on and not ev.power_failure and new.voltage >= new.v_on:
        new.on = True
        ev.power_restore = True
    return new, ev


# --------------------------------------------------------------------------
# harvest traces


@dataclass
class PowerTrace:
    """Harvested power over time; ``cumulative(t)`` is the exact nJ harvested on [0, t]."""

    kind: str = "constant"
    amplitude: float = 0.0
    period: float = 1000.0
    duty: float = 0.5
    seed: int = 0
    times: Optional[np.ndarray] = None
    powers: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("constant", "square", "sine", "random", "sampled"):
            raise TraceParameterError(f"unknown waveform {self.kind!r}")
        if self.amplitude < 0:
            raise TraceParameterError("amplitude must be non-negative")
        if self.kind != "constant" and self.kind != "sampled" and self.period <= 0:
            raise TraceParameterError("period must be positive")
        if not 0.0 <= self.duty <= 1.0:
            raise TraceParameterError("duty must lie in [0, 1]")
        if self.kind == "sampled":
            if self.times is None or self.powers is None or len(self.times) == 0:
                raise TraceParameterError("sampled traces need time and power samples")
            self.times = np.asarray(self.times, dtype=np.float64)
            self.powers = np.asarray(self.powers, dtype=np.float64)
            if np.any(self.powers < 0):
                raise TraceParameterError("power samples must be non-negative")
            if np.any(np.diff(self.times) <= 0):
                raise TraceParameterError("sample times must increase")
            self._prepare_sampled()
        elif self.kind == "random":
            self._rng = np.random.default_rng(self.seed)
            self._rand_levels = np.zeros(0)
            self._rand_cum = np.zeros(1)

    # -- random ------------------------------------------------------------
    def _extend_random(self, n_needed: int):
        while self._rand_levels.size < n_needed:
            chunk = max(4096, n_needed - self._rand_levels.size)
            level = self._rng.uniform(0.0, self.amplitude, size=chunk)
            live = self._rng.random(size=chunk) < self.duty
            new = np.where(live, level, 0.0)
            self._rand_levels = np.concatenate([self._rand_levels, new])
            step_energy = new * self.period / 1000.0
            self._rand_cum = np.concatenate([self._rand_cum, self._rand_cum[-1] + np.cumsum(step_energy)])

    def _prepare_sampled(self):
        t, p = self.times, self.powers
        seg = np.diff(t) * p[:-1] / 1000.0
        self._samp_cum = np.concatenate([[0.0], np.cumsum(seg)])

    # -- evaluation --------------------------------------------------------
    def power(self, t: float) -> float:
        if self.kind == "constant":
            return self.amplitude
        if self.kind == "square":
            return self.amplitude if (t % self.period) < self.duty * self.period else 0.0
        if self.kind == "sine":
            return 0.5 * self.amplitude * (1.0 + math.sin(2.0 * math.pi * t / self.period))
        if self.kind == "random":
            n = int(t // self.period)
            self._extend_random(n + 1)
            return float(self._rand_levels[n])
        i = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.powers[max(i, 0)])

    def cumulative(self, t: float) -> float:
        if t <= 0:
            return 0.0
        a = self.amplitude
        if self.kind == "constant":
            return a * t / 1000.0
        if self.kind == "square":
            n, rem = divmod(t, self.period)
            on = self.duty * self.period
            return a * (n * on + min(rem, on)) / 1000.0
        if self.kind == "sine":
            w = 2.0 * math.pi / self.period
            return 0.5 * a * (t + (1.0 - math.cos(w * t)) / w) / 1000.0
        if self.kind == "random":
            n = int(t // self.period)
            self._extend_random(n + 1)
            return float(self._rand_cum[n] + self._rand_levels[n] * (t - n * self.period) / 1000.0)
        times = self.times
        if t <= times[0]:
            return self.powers[0] * t / 1000.0
        i = int(np.searchsorted(times, t, side="right")) - 1
        base = self.powers[0] * times[0] / 1000.0
        if i >= len(times) - 1:
            return float(base + self._samp_cum[-1] + self.powers[-1] * (t - times[-1]) / 1000.0)
        return float(base + self._samp_cum[i] + self.powers[i] * (t - times[i]) / 1000.0)

    def energy(self, t0: float, t1: float) -> float:
        return self.cumulative(t1) - self.cumulative(t0)

    def mean_power(self, t0: float, t1: float) -> float:
        return self.energy(t0, t1) * 1000.0 / (t1 - t0)

    def time_to_harvest(self, t0: float, need: float, t_limit: float) -> Optional[float]:
        """Earliest t in [t0, t_limit] with energy(t0, t) >= need, or None."""
        if need <= 0:
            return t0
        base = self.cumulative(t0)
        step = max(self.period if self.kind != "constant" else 1.0, 1.0)
        lo, hi = t0, min(t0 + step, t_limit)
        # gallop outward; random traces are only generated as far as needed
        while self.cumulative(hi) - base < need:
            if hi >= t_limit:
                return None
            lo, hi = hi, min(t0 + (hi - t0) * 2.0 + step, t_limit)
        for _ in range(200):
            if hi - lo <= 1e-6 * max(1.0, hi):
                break
            mid = 0.5 * (lo + hi)
            if self.cumulative(mid) - base >= need:
                hi = mid
            else:
                lo = mid
        return hi

    def samples(self, duration: float, step: float):
        t = np.arange(0.0, duration, step)
        return t, np.array([self.power(x) for x in t])


def make_trace(spec) -> PowerTrace:
    """Build a trace from a mapping (or TraceSpec-like object) of parameters."""
    if isinstance(spec, PowerTrace):
        return spec
    if not isinstance(spec, dict):
        spec = dataclasses.asdict(spec)
    params = dict(spec)
    kind = params.pop("kind", params.pop("waveform", "constant"))
    if "path" in params:
        return load_trace(params["path"])
    return PowerTrace(kind=kind, **params)


def load_trace(path) -> PowerTrace:
    """Two-column text: ``time_us power_uW`` per line, '#' comments allowed."""
    data = np.loadtxt(Path(path), comments="#", ndmin=2)
    if data.shape[1] != 2:
        raise TraceParameterError(f"{path}: expected two columns, found {data.shape[1]}")
    return PowerTrace(kind="sampled", times=data[:, 0], powers=data[:, 1])


def save_trace(trace: PowerTrace, path, duration: float, step: float):
    if trace.kind == "sampled":
        t, p = trace.times, trace.powers
    else:
        t, p = trace.samples(duration, step)
    np.savetxt(Path(path), np.column_stack([t, p]), fmt="%.6f", header="time_us power_uW")


class Supply:
    """Mutable capacitor + trace pair driven by the runtime's event loop.

    Same arithmetic as :func:`advance`, without allocating a new state per
    step.  Tracks harvested/consumed/wasted totals and counts any step that
    would break conservation (consumed > harvested + initial charge).
    """

    def __init__(self, trace: PowerTrace, state: EnergyState):
        self.trace = trace
        self.state = state
        self.e_on = state.energy_at(state.v_on)
        self.e_off = state.energy_at(state.v_off)
        self.e_max = state.energy_at(state.v_max)
        self.e = min(state.stored, self.e_max)
        self.initial = self.e
        self.t = state.time
        self.on = state.on or self.e >= self.e_on
        self.harvested = 0.0
        self.consumed = 0.0
        self.wasted = 0.0
        self.conservation_violations = 0

    def available(self) -> float:
        return self.e - self.e_off if self.on else 0.0

    def _check(self):
        slack = 1e-9 * (self.harvested + self.initial) + 1e-6
        if self.consumed > self.harvested + self.initial + slack or self.e < -1e-9:
            self.conservation_violations += 1

    def run(self, consumed: float, dt: float) -> bool:
        """Spend ``consumed`` nJ over ``dt`` us; False if the supply browned out."""
        h = self.trace.energy(self.t, self.t + dt) if dt > 0 else 0.0
        self.t += dt
        self.harvested += h
        e = self.e + h
        ok = True
        if consumed > e - self.e_off:
            consumed = max(0.0, e - self.e_off)
            ok = False
        e -= consumed
        self.consumed += consumed
        if e > self.e_max:
            self.wasted += e - self.e_max
            e = self.e_max
        self.e = e
        if not ok:
            self.on = False
        self._check()
        return ok

    def brownout(self):
        """Unscheduled failure: whatever sits above v_off is lost with the load."""
        if self.e > self.e_off:
            self.consumed += self.e - self.e_off
            self.e = self.e_off
        self.on = False
        self._check()

    def power_down(self):
        self.on = False

    def charge_to(self, target: float, t_limit: float) -> bool:
        """Sleep while harvesting until stored energy reaches ``target``."""
        if target > self.e_max:
            self._idle_until(t_limit)
            return False
        need = target - self.e
        if need <= 0:
            return True
        t = self.trace.time_to_harvest(self.t, need, t_limit)
        if t is None:
            self._idle_until(t_limit)
            return False
        h = self.trace.energy(self.t, t)
        self.harvested += h
        self.e = min(self.e + h, self.e_max)
        self.t = t
        return True

    def _idle_until(self, t_limit: float):
        if t_limit > self.t:
            h = self.trace.energy(self.t, t_limit)
            self.harvested += h
            e = self.e + h
            if e > self.e_max:
                self.wasted += e - self.e_max
                e = self.e_max
            self.e = e
            self.t = t_limit

    def snapshot(self) -> EnergyState:
        return dataclasses.replace(self.state, voltage=self.state.voltage_for(self.e), time=self.t, on=self.on)
