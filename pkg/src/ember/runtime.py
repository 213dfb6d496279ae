"""Checkpoint-free intermittent inference.

The executor keeps no snapshot of registers or stack.  Everything needed to
continue after a power failure is the progress record (layer ``L`` plus the
loop position ``(I, W, O)``) and the activations already sitting in NVM.
Work is cut into atomic units; a unit runs only when the capacitor holds
strictly more than its worst-case energy, and it ends with one progress
commit that carries the unit's output word, so a unit either happened or
did not.

Activations ping-pong between two NVM buffers: layer ``i`` reads
``activations_in``/``activations_out`` as left by layer ``i - 1`` and writes
the other one.  Re-running a unit therefore never reads its own output.
"""

from __future__ import annotations

import bisect
import dataclasses
import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ember.energy import CostModel, EnergyState, PowerTrace, Supply, estimate_section, make_trace
from ember.errors import ConfigurationError, CorruptProgressError, PowerFailure, UnrecoverableStateError
from ember.model import (
    ACC_MAX,
    ACC_MIN,
    MAC_KINDS,
    InferenceMode,
    LayerKind,
    ModelSpec,
    QTensor,
    layer_geometries,
    requant_shift,
    round_shift,
    sat16,
    sat32,
)
from ember.nvm import NO_PENDING, RECORD_WORDS, SLOT_A, SLOT_B, NvmImage, ProgressRecord, SimulationKilled, VolatileImage

# protection can only be switched off in the simulator; there is no device build
SIMULATION_BUILD = True

MODE_CODES = {InferenceMode.FULL: 0, InferenceMode.LOW_ENERGY: 1}
CODE_MODES = {v: k for k, v in MODE_CODES.items()}


class Granularity(enum.Enum):
    MAC = "mac"
    OUTPUT_ELEMENT = "element"
    OUTPUT_ROW = "row"


class ProtectionMode(enum.Enum):
    ON = "on"
    WAR_INJECTION_OFF = "war_injection_off"


@dataclass(frozen=True)
class ModePolicy:
    """``full`` and ``low_energy`` force a mode; ``auto`` compares the mean
    harvest power over the first ``window`` microseconds with ``threshold`` (uW)."""

    kind: str = "full"
    threshold: float = 0.0
    window: float = 100_000.0

    def __post_init__(self):
        if self.kind not in ("full", "low_energy", "auto"):
            raise ConfigurationError(f"unknown mode policy {self.kind!r}")
        if self.kind == "auto" and self.window <= 0:
            raise ConfigurationError("auto policy needs a positive window")

    @classmethod
    def parse(cls, text: str) -> "ModePolicy":
        """``full``, ``low-energy`` or ``auto:<threshold_uW>[:<window_us>]``."""
        text = text.strip().lower().replace("-", "_")
        if text in ("full", "low_energy"):
            return cls(text)
        if text.startswith("auto"):
            parts = text.split(":")
            if len(parts) < 2:
                raise ConfigurationError("auto policy needs a threshold, e.g. auto:50")
            window = float(parts[2]) if len(parts) > 2 else 100_000.0
            return cls("auto", float(parts[1]), window)
        raise ConfigurationError(f"unknown mode policy {text!r}")


def select_mode(trace: PowerTrace, policy: ModePolicy, t0: float = 0.0) -> InferenceMode:
    if policy.kind == "full":
        return InferenceMode.FULL
    if policy.kind == "low_energy":
        return InferenceMode.LOW_ENERGY
    mean = trace.mean_power(t0, t0 + policy.window)
    return InferenceMode.LOW_ENERGY if mean < policy.threshold else InferenceMode.FULL


@dataclass
class ExecConfig:
    granularity: Granularity = Granularity.OUTPUT_ELEMENT
    protection: ProtectionMode = ProtectionMode.ON
    mode_policy: ModePolicy = field(default_factory=ModePolicy)
    max_sim_time: float = 60e6
    cost: CostModel = field(default_factory=CostModel)
    capacitance: float = 100e-6
    v_on: float = 2.8
    v_off: float = 1.8
    v_max: float = 3.6
    initial_voltage: float = 0.0
    # "restart": no progress preservation, every power-up starts at layer 0
    baseline: str = "none"
    clock_mhz: float = 16.0
    record_units: bool = False

    def __post_init__(self):
        self.granularity = Granularity(self.granularity)
        self.protection = ProtectionMode(self.protection)
        if isinstance(self.mode_policy, str):
            self.mode_policy = ModePolicy.parse(self.mode_policy)
        if self.protection == ProtectionMode.WAR_INJECTION_OFF and not SIMULATION_BUILD:
            raise ConfigurationError("protection can only be disabled in simulation builds")
        if self.baseline not in ("none", "restart"):
            raise ConfigurationError(f"unknown baseline {self.baseline!r}")
        if self.max_sim_time <= 0:
            raise ConfigurationError("max_sim_time must be positive")

    def energy_state(self) -> EnergyState:
        return EnergyState(self.capacitance, self.initial_voltage, self.v_on, self.v_off, self.v_max)

    @property
    def gated(self) -> bool:
        return self.protection == ProtectionMode.ON and self.baseline == "none"


@dataclass
class ExecutionReport:
    completed: bool = False
    output: Optional[QTensor] = None
    predicted_class: Optional[int] = None
    power_cycles: int = 0
    cycles_total: int = 0
    energy_harvested: float = 0.0
    energy_consumed: float = 0.0
    nvm_reads: int = 0
    nvm_writes: int = 0
    mac_count: int = 0
    progress_commits: int = 0
    mode_used: InferenceMode = InferenceMode.FULL
    sim_time: float = 0.0
    units_executed: int = 0
    gate_denials: int = 0
    failures: int = 0
    timed_out: bool = False
    killed: bool = False
    conservation_violations: int = 0
    gate_violations: int = 0
    corrupt_loads: int = 0
    unit_log: Optional[list] = None

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "unit_log"}
        d["mode_used"] = self.mode_used.value
        if self.output is not None:
            d["output"] = {"shape": list(self.output.shape), "scale": self.output.scale,
                           "data": self.output.data.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExecutionReport":
        d = dict(d)
        d["mode_used"] = InferenceMode(d.get("mode_used", "full"))
        out = d.get("output")
        if out is not None:
            d["output"] = QTensor(tuple(out["shape"]), np.asarray(out["data"]), out["scale"])
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class LoopState:
    """Where execution stands: layer, flat output index, index into the
    output's active weight positions, and the carried partial sum."""

    L: int
    O: int = 0
    k: int = 0
    acc: int = 0


# --------------------------------------------------------------------------
# static plan: addresses, active positions and per-unit energy


def _signed32(lo: int, hi: int) -> int:
    return (hi << 16) | (lo & 0xFFFF)


class LayerPlan:
    def __init__(self, idx, layer, geom, in_addr, out_addr, w_addr, b_addr, in_scale, mode):
        self.idx = idx
        self.layer = layer
        self.kind = layer.kind
        self.geom = geom
        self.in_addr, self.out_addr = in_addr, out_addr
        self.w_addr, self.b_addr = w_addr, b_addr
        self.n_out = geom.n_outputs
        self.red = geom.reduction
        self.row = geom.row_length()
        self.is_mac = layer.kind in MAC_KINDS
        self.active = None
        if self.is_mac:
            oc = layer.dims[0]
            mask = layer.effective_mask(mode)
            if mask is None:
                full = list(range(self.red))
                self.active = [full] * oc
            else:
                flat = mask.reshape(oc, -1)
                self.active = [np.flatnonzero(flat[c]).tolist() for c in range(oc)]
            self.shift = requant_shift(in_scale, layer.weight_scale, layer.out_scale)
            if layer.kind == LayerKind.CONV2D:
                _, h, wd = geom.in_shape
                _, _, kh, kw = layer.dims
                self.offsets = [ic * h * wd + kr * wd + kc for ic in range(layer.dims[1])
                                for kr in range(kh) for kc in range(kw)]
                self.plane = geom.out_shape[1] * geom.out_shape[2]
                self.out_w = geom.out_shape[2]
                self.in_w = wd
            else:
                self.offsets = list(range(self.red))
            self.pairs = [[(w_addr + c * self.red + w, self.offsets[w]) for w in act]
                          for c, act in enumerate(self.active)]
        elif layer.kind == LayerKind.MAXPOOL:
            _, h, wd = geom.in_shape
            wc, wh, ww = layer.dims
            self.window = [dc * h * wd + dr * wd + dcol for dc in range(wc) for dr in range(wh) for dcol in range(ww)]
            self.pool = (wc * h * wd, wh * wd, ww, geom.out_shape[1] * geom.out_shape[2], geom.out_shape[2])

    def channel(self, o: int) -> int:
        return self.geom.output_channel(o)

    def positions(self, o: int) -> list:
        return self.active[self.channel(o)] if self.is_mac else []

    def w_of(self, o: int, k: int) -> int:
        act = self.positions(o)
        return act[k] if k < len(act) else 0

    def input_base(self, o: int) -> int:
        """Absolute address of the window origin feeding output ``o``."""
        if self.kind == LayerKind.CONV2D:
            rem = o % self.plane
            r, c = divmod(rem, self.out_w)
            return self.in_addr + r * self.in_w + c
        if self.kind == LayerKind.FULLY_CONNECTED:
            return self.in_addr
        if self.kind == LayerKind.MAXPOOL:
            chs, rows, ww, plane, ow = self.pool
            ch, rem = divmod(o, plane)
            r, c = divmod(rem, ow)
            return self.in_addr + ch * chs + r * rows + c * ww
        return self.in_addr + o


class ExecutionPlan:
    """Static layout and loop tables for one model under one mode."""

    def __init__(self, model: ModelSpec, mode: InferenceMode, granularity: Granularity):
        self.model = model
        self.mode = mode
        self.granularity = granularity
        self.n_layers = len(model.layers)
        shapes = model.activation_shapes()
        scales = model.activation_scales()
        geoms = layer_geometries(model)
        self.input_size = int(np.prod(shapes[0]))
        self.buf_size = max(int(np.prod(s)) for s in shapes[1:])
        n_w = sum(l.weight_count for l in model.layers)
        n_b = sum(2 * l.dims[0] for l in model.layers if l.kind in MAC_KINDS)
        sizes = [
            ("weights", n_w), ("biases", n_b), ("input", self.input_size),
            ("activations_in", self.buf_size), ("activations_out", self.buf_size),
            ("acc_cell", 2), (SLOT_A, RECORD_WORDS), (SLOT_B, RECORD_WORDS),
        ]
        self.layout = {}
        addr = 0
        for name, n in sizes:
            self.layout[name] = (addr, n)
            addr += n
        bufs = (self.layout["activations_out"][0], self.layout["activations_in"][0])
        w_addr, b_addr = self.layout["weights"][0], self.layout["biases"][0]
        self.layers = []
        for i, layer in enumerate(model.layers):
            in_addr = self.layout["input"][0] if i == 0 else bufs[(i - 1) % 2]
            self.layers.append(LayerPlan(i, layer, geoms[i], in_addr, bufs[i % 2], w_addr, b_addr, scales[i], mode))
            w_addr += layer.weight_count
            if layer.kind in MAC_KINDS:
                b_addr += 2 * layer.dims[0]
        self.output_addr = bufs[(self.n_layers - 1) % 2]
        self.output_shape = shapes[-1]
        self.output_scale = scales[-1]

    # -- record <-> loop state ------------------------------------------------
    def input_index(self, L: int, O: int, W: int) -> int:
        if L >= self.n_layers:
            return 0
        return self.layers[L].geom.input_index(O, W)

    def record_for(self, state: LoopState) -> tuple:
        """(I, W) stored for ``state``."""
        if state.L >= self.n_layers:
            return 0, 0
        W = self.layers[state.L].w_of(state.O, state.k) if self.granularity == Granularity.MAC else 0
        return self.input_index(state.L, state.O, W), W

    def resume(self, rec: ProgressRecord) -> LoopState:
        n = self.n_layers
        if rec.L > n:
            raise CorruptProgressError(f"layer {rec.L} beyond model depth {n}")
        if rec.mode not in CODE_MODES or CODE_MODES[rec.mode] != self.mode:
            raise CorruptProgressError(f"record mode {rec.mode} does not match the plan")
        if rec.L == n:
            if rec.O or rec.W or rec.I:
                raise CorruptProgressError("terminal record with a nonzero loop position")
            return LoopState(n)
        lp = self.layers[rec.L]
        if rec.O >= lp.n_out:
            raise CorruptProgressError(f"output index {rec.O} outside layer {rec.L} ({lp.n_out} outputs)")
        k = 0
        if self.granularity == Granularity.MAC and lp.is_mac:
            act = lp.positions(rec.O)
            k = bisect.bisect_left(act, rec.W)
            if act and (k >= len(act) or act[k] != rec.W):
                raise CorruptProgressError(f"weight position {rec.W} is not active for output {rec.O}")
            if not act and rec.W:
                raise CorruptProgressError("bias-only output with a nonzero weight position")
        elif rec.W:
            raise CorruptProgressError(f"weight position {rec.W} at {self.granularity.value} granularity")
        if self.granularity == Granularity.OUTPUT_ROW and rec.O % lp.row:
            raise CorruptProgressError(f"output {rec.O} is not a row start")
        expected_i = self.input_index(rec.L, rec.O, rec.W)
        if rec.I != expected_i:
            raise CorruptProgressError(f"stored input index {rec.I} != derived {expected_i}")
        return LoopState(rec.L, rec.O, k, rec.acc if k else 0)

    def valid(self, rec: ProgressRecord) -> bool:
        try:
            self.resume(rec)
            return True
        except CorruptProgressError:
            return False

    def units(self):
        """Start position (L, O, W) of every atomic unit, in execution order."""
        for lp in self.layers:
            if self.granularity == Granularity.MAC and lp.is_mac:
                for o in range(lp.n_out):
                    for w in lp.positions(o) or [0]:
                        yield (lp.idx, o, w)
            elif self.granularity == Granularity.OUTPUT_ROW:
                for o in range(0, lp.n_out, lp.row):
                    yield (lp.idx, o, 0)
            else:
                for o in range(lp.n_out):
                    yield (lp.idx, o, 0)


def iter_units(model: ModelSpec, mode: InferenceMode = InferenceMode.FULL,
               granularity: Granularity = Granularity.OUTPUT_ELEMENT):
    return ExecutionPlan(model, mode, Granularity(granularity)).units()


def resume_from(record: ProgressRecord, model: ModelSpec,
                granularity: Granularity = Granularity.OUTPUT_ELEMENT) -> LoopState:
    """Loop state a progress record points at; raises CorruptProgressError if
    the stored input index disagrees with the one derived from (L, O, W)."""
    mode = CODE_MODES.get(record.mode)
    if mode is None:
        raise CorruptProgressError(f"unknown mode code {record.mode}")
    return ExecutionPlan(model, mode, Granularity(granularity)).resume(record)


def prepare_device(model: ModelSpec, input: QTensor, mode: InferenceMode,
                   granularity: Granularity = Granularity.OUTPUT_ELEMENT,
                   nvm: Optional[NvmImage] = None) -> NvmImage:
    """Program weights, biases and the input into NVM and format the progress slots."""
    plan = ExecutionPlan(model, mode, Granularity(granularity))
    nvm = nvm if nvm is not None else NvmImage()
    for name, (start, size) in plan.layout.items():
        seg = nvm.allocate(name, size)
        assert seg.start == start
    w_parts = [l.weights.data for l in model.layers if l.weight_count]
    if w_parts:
        nvm.program(plan.layout["weights"][0], np.concatenate(w_parts))
    b_words = []
    for l in model.layers:
        if l.kind in MAC_KINDS:
            for b in l.bias_values().tolist():
                b &= 0xFFFFFFFF
                b_words += [b & 0xFFFF, b >> 16]
    if b_words:
        nvm.program(plan.layout["biases"][0], b_words)
    if tuple(input.shape) != model.input_shape:
        raise ConfigurationError(f"model expects input {model.input_shape}, got {input.shape}")
    nvm.program(plan.layout["input"][0], input.data)
    I, W = plan.record_for(LoopState(0))
    nvm.format_progress(ProgressRecord(I=I, W=W, mode=MODE_CODES[mode]))
    nvm.tag = (model.name, model.input_shape, MODE_CODES[mode], plan.granularity.value)
    return nvm


# --------------------------------------------------------------------------
# executor


class Executor:
    """One simulated device running one inference."""

    def __init__(self, model: ModelSpec, trace: PowerTrace, config: ExecConfig, nvm: NvmImage,
                 mode: InferenceMode):
        self.model = model
        self.config = config
        self.nvm = nvm
        self.plan = ExecutionPlan(model, mode, config.granularity)
        self.mode = mode
        self.supply = Supply(trace, config.energy_state())
        self.vol = VolatileImage()
        self.cost = config.cost
        self.persist = config.baseline == "none"
        self.unsafe = config.protection == ProtectionMode.WAR_INJECTION_OFF
        self.acc_addr = self.plan.layout["acc_cell"][0]
        self.report = ExecutionReport(mode_used=mode, unit_log=[] if config.record_units else None)
        self.state: Optional[LoopState] = None
        self.cached_layer: Optional[int] = None
        self.bias: list = []
        self._macs = 0
        self._vol = 0
        self._commits = 0
        self._transitions = 0
        self._armed = False
        self._estimates()
        nvm.validator = self.plan.valid

    def _estimates(self):
        cost, mode = self.cost, self.mode
        gran = self.config.granularity if self.persist else Granularity.OUTPUT_ELEMENT
        self.e_boot = estimate_section("boot", None, cost, record_words=RECORD_WORDS).e_req
        self.e_trans, self.e_unit = [], []
        for lp in self.plan.layers:
            self.e_trans.append(estimate_section("transition", lp.layer, cost, mode).e_req)
            if gran == Granularity.MAC and lp.is_mac:
                e = estimate_section("mac", lp.layer, cost, mode).e_req
                if self.unsafe:
                    # accumulator cell round trip
                    e += 2 * cost.nvm_read + 2 * cost.nvm_write
            elif gran == Granularity.OUTPUT_ROW:
                e = estimate_section("output_row", lp.layer, cost, mode, lp.geom).e_req
            else:
                e = estimate_section("output_element", lp.layer, cost, mode).e_req
            if not self.persist:
                e -= cost.commit
            self.e_unit.append(e)

    # -- accounting ----------------------------------------------------------
    def _begin(self):
        self._r0, self._w0 = self.nvm.reads, self.nvm.writes
        self._macs = self._vol = self._commits = self._transitions = 0

    def _finish(self, e_req: Optional[float], e_av: float) -> bool:
        c = self.cost
        reads = self.nvm.reads - self._r0
        data_writes = self.nvm.writes - self._w0 - RECORD_WORDS * self._commits
        energy = (self._macs * c.mac + reads * c.nvm_read + data_writes * c.nvm_write
                  + self._commits * c.commit + self._vol * c.volatile + self._transitions * c.transition)
        cycles = (self._macs * c.mac_cycles + reads * c.nvm_read_cycles + data_writes * c.nvm_write_cycles
                  + self._commits * c.commit_cycles + self._vol * c.volatile_cycles
                  + self._transitions * c.transition_cycles)
        rep = self.report
        rep.cycles_total += cycles
        rep.mac_count += self._macs
        rep.progress_commits += self._commits
        ok = self.supply.run(energy, cycles / self.config.clock_mhz)
        if e_req is not None and (e_av <= e_req or energy > e_req + 1e-9 or not ok):
            rep.gate_violations += 1
        return ok

    def _admit(self, e_req: float) -> bool:
        """Gate check; on denial the device powers down until the section fits."""
        if self.supply.available() > e_req:
            return True
        self.report.gate_denials += 1
        self.supply.power_down()
        # after the restore the device must also pay for boot and layer entry
        self._need = e_req + self.e_boot + max(self.e_trans)
        return False

    def _shortfall(self, e_req: float, writes: int) -> bool:
        """Ungated modes: arm a brown-out part-way through a unit that cannot be paid for."""
        av = self.supply.available()
        if av >= e_req:
            return False
        if writes <= 0 or not self.persist:
            return True
        if self.nvm.fail_at_write is None:
            self.nvm.fail_at_write = self.nvm.write_attempts + int(writes * max(av, 0.0) / e_req)
            self._armed = True
        return False

    def _disarm(self):
        if self._armed:
            self.nvm.fail_at_write = None
            self._armed = False

    # -- commit ----------------------------------------------------------------
    def _commit(self, nxt: LoopState, pending=None):
        if not self.persist:
            return
        I, W = self.plan.record_for(nxt)
        addr, value = pending if pending is not None else (NO_PENDING, 0)
        rec = ProgressRecord(nxt.L, I, W, nxt.O, nxt.acc, self.nvm.last_generation + 1,
                             addr, value, MODE_CODES[self.mode])
        self.nvm.commit_progress(rec)
        self._commits += 1

    def _next_output(self, L: int, O: int) -> LoopState:
        if O + 1 < self.plan.layers[L].n_out:
            return LoopState(L, O + 1)
        return LoopState(L + 1)

    # -- kernels -----------------------------------------------------------------
    def _element_value(self, lp: LayerPlan, o: int) -> int:
        words = self.nvm.words
        if lp.is_mac:
            ch = lp.channel(o)
            xb = lp.input_base(o)
            acc = self.bias[ch]
            pairs = lp.pairs[ch]
            for wa, io in pairs:
                acc += words[wa] * words[xb + io]
                if acc > ACC_MAX or acc < ACC_MIN:
                    acc = sat32(acc)
            self.nvm.reads += 2 * len(pairs)
            self._macs += len(pairs)
            return sat16(round_shift(acc, lp.shift))
        if lp.kind == LayerKind.MAXPOOL:
            xb = lp.input_base(o)
            v = max(words[xb + d] for d in lp.window)
            self.nvm.reads += len(lp.window)
            self._vol += len(lp.window)
            return v
        self.nvm.reads += 1
        return max(words[lp.in_addr + o], 0)

    def _unit_element(self, lp: LayerPlan, st: LoopState) -> LoopState:
        value = self._element_value(lp, st.O)
        nxt = self._next_output(lp.idx, st.O)
        addr = lp.out_addr + st.O
        if self.persist and not self.unsafe:
            self._commit(nxt, (addr, value))
            self.nvm.write(addr, value)
        else:
            self.nvm.write(addr, value)
            self._commit(nxt)
        return nxt

    def _unit_row(self, lp: LayerPlan, st: LoopState) -> LoopState:
        end = min(st.O + lp.row, lp.n_out)
        for o in range(st.O, end):
            self.nvm.write(lp.out_addr + o, self._element_value(lp, o))
        nxt = LoopState(lp.idx, end) if end < lp.n_out else LoopState(lp.idx + 1)
        self._commit(nxt)
        return nxt

    def _unit_mac(self, lp: LayerPlan, st: LoopState) -> LoopState:
        nvm = self.nvm
        ch = lp.channel(st.O)
        act = lp.active[ch]
        out_addr = lp.out_addr + st.O
        if not act:
            value = sat16(round_shift(self.bias[ch], lp.shift))
            nxt = self._next_output(lp.idx, st.O)
            if self.unsafe:
                nvm.write(out_addr, value)
                self._commit(nxt)
            else:
                self._commit(nxt, (out_addr, value))
                nvm.write(out_addr, value)
            return nxt
        wa, io = lp.pairs[ch][st.k]
        xb = lp.input_base(st.O)
        if st.k == 0:
            acc = self.bias[ch]
        elif self.unsafe:
            lo, hi = nvm.read(self.acc_addr), nvm.read(self.acc_addr + 1)
            acc = _signed32(lo, hi)
        else:
            acc = st.acc
        acc = sat32(acc + nvm.words[wa] * nvm.words[xb + io])
        nvm.reads += 2
        self._macs += 1
        last = st.k + 1 == len(act)
        if self.unsafe:
            # in-place accumulation, index committed separately: the hazard window
            a = acc & 0xFFFFFFFF
            nvm.write(self.acc_addr, a & 0xFFFF)
            nvm.write(self.acc_addr + 1, a >> 16)
            if last:
                nvm.write(out_addr, sat16(round_shift(acc, lp.shift)))
                nxt = self._next_output(lp.idx, st.O)
            else:
                nxt = LoopState(lp.idx, st.O, st.k + 1)
            self._commit(nxt)
            return nxt
        if last:
            value = sat16(round_shift(acc, lp.shift))
            nxt = self._next_output(lp.idx, st.O)
            self._commit(nxt, (out_addr, value))
            nvm.write(out_addr, value)
            return nxt
        nxt = LoopState(lp.idx, st.O, st.k + 1, acc)
        self._commit(nxt)
        return nxt

    def execute_atomic_unit(self, st: LoopState) -> LoopState:
        lp = self.plan.layers[st.L]
        if self.report.unit_log is not None:
            W = lp.w_of(st.O, st.k) if (lp.is_mac and self.config.granularity == Granularity.MAC) else 0
            self.report.unit_log.append((st.L, st.O, W))
        gran = self.config.granularity if self.persist else Granularity.OUTPUT_ELEMENT
        if gran == Granularity.MAC and lp.is_mac:
            return self._unit_mac(lp, st)
        if gran == Granularity.OUTPUT_ROW:
            return self._unit_row(lp, st)
        return self._unit_element(lp, st)

    def _unit_writes(self, lp: LayerPlan, st: LoopState) -> int:
        w = RECORD_WORDS if self.persist else 0
        if self.config.granularity == Granularity.MAC and lp.is_mac:
            return w + 3
        if self.config.granularity == Granularity.OUTPUT_ROW:
            return w + lp.row
        return w + 1

    # -- sections ----------------------------------------------------------------
    def _boot(self):
        prior = self.nvm.last_committed
        rec = self.nvm.load_progress()
        if prior is not None and not rec.same_state(prior):
            self.report.corrupt_loads += 1
        st = self.plan.resume(rec)
        if rec.has_pending:
            self.nvm.write(rec.pending_addr, rec.pending_value)
        return st

    def _transition(self, L: int):
        lp = self.plan.layers[L]
        self._transitions += 1
        self.bias = []
        if lp.is_mac:
            oc = lp.layer.dims[0]
            raw = self.nvm.read_block(lp.b_addr, 2 * oc)
            self.bias = [_signed32(raw[2 * c], raw[2 * c + 1]) for c in range(oc)]
            self.vol.store(0, self.bias)
            self._vol += oc
        self.cached_layer = L

    def _lose_power(self):
        self._disarm()
        self.report.failures += 1
        self.supply.brownout()
        self._off()

    def _off(self):
        self.vol.clear()
        self.state = None
        self.cached_layer = None
        self.bias = []

    # -- main loop -----------------------------------------------------------------
    def run(self) -> ExecutionReport:
        rep, sup, plan = self.report, self.supply, self.plan
        deadline = self.config.max_sim_time
        gated = self.config.gated
        n = plan.n_layers
        self._need = 0.0
        margin = lambda e: e * (1 + 1e-12) + 1e-6
        try:
            while True:
                if not sup.on:
                    target = max(sup.e_on, margin(sup.e_off + self._need))
                    if not sup.charge_to(target, deadline):
                        rep.timed_out = True
                        break
                    sup.on = True
                    rep.power_cycles += 1
                    self._need = 0.0
                    self._off()
                if self.state is None:
                    if not self.persist:
                        self.state = LoopState(0)
                    else:
                        if not self._section(self.e_boot, gated):
                            continue
                        try:
                            self.state = self._boot()
                        except PowerFailure:
                            self._lose_power()
                            continue
                        if not self._close(self.e_boot, gated):
                            continue
                st = self.state
                while st.L < n:
                    if self.cached_layer != st.L:
                        if not self._section(self.e_trans[st.L], gated):
                            break
                        self._transition(st.L)
                        if not self._close(self.e_trans[st.L], gated):
                            break
                    e_req = self.e_unit[st.L]
                    lp = plan.layers[st.L]
                    if gated:
                        if not self._admit(e_req):
                            break
                    elif self._shortfall(e_req, self._unit_writes(lp, st)):
                        self._lose_power()
                        break
                    self._e_av = sup.available()
                    self._begin()
                    try:
                        st = self.execute_atomic_unit(st)
                    except PowerFailure:
                        self._finish(None, 0.0)
                        self._lose_power()
                        break
                    self._disarm()
                    self.state = st
                    rep.units_executed += 1
                    if not self._finish(e_req if gated else None, self._e_av):
                        self._lose_power()
                        break
                    if st.L != lp.idx:
                        self.cached_layer = None
                    if sup.t >= deadline:
                        rep.timed_out = True
                        break
                if rep.timed_out:
                    break
                if self.state is not None and self.state.L >= n:
                    rep.completed = True
                    break
        except SimulationKilled:
            rep.killed = True
        self.nvm.fail_at_write = None
        return self._wrap_up()

    def _section(self, e_req: float, gated: bool) -> bool:
        """Open a boot/transition section, gating it like any other unit."""
        if gated:
            if not self._admit(e_req):
                self._off()
                return False
        elif self.supply.available() < e_req:
            self._lose_power()
            return False
        self._e_av = self.supply.available()
        self._begin()
        return True

    def _close(self, e_req: float, gated: bool) -> bool:
        if not self._finish(e_req if gated else None, self._e_av):
            self._lose_power()
            return False
        return True

    def _wrap_up(self) -> ExecutionReport:
        rep, sup = self.report, self.supply
        rep.energy_harvested = sup.harvested
        rep.energy_consumed = sup.consumed
        rep.sim_time = sup.t
        rep.conservation_violations = sup.conservation_violations
        rep.nvm_reads = self.nvm.reads
        rep.nvm_writes = self.nvm.writes
        if rep.completed:
            a, size = self.plan.output_addr, int(np.prod(self.plan.output_shape))
            data = np.asarray(self.nvm.words[a:a + size], dtype=np.int64)
            rep.output = QTensor(self.plan.output_shape, data, self.plan.output_scale)
            rep.predicted_class = int(np.argmax(rep.output.data))
        return rep


def run_intermittent(model: ModelSpec, input: QTensor, trace, config: Optional[ExecConfig] = None,
                     nvm: Optional[NvmImage] = None) -> ExecutionReport:
    """Simulate one inference on an energy-harvesting device.

    A fresh (or empty) ``nvm`` is programmed with the model and ``input``;
    an image that already holds this model resumes from its progress record,
    which is how a killed simulation is continued.
    """
    config = config or ExecConfig()
    trace = make_trace(trace)
    if nvm is not None and nvm.segments:
        if nvm.tag is None or nvm.tag[0] != model.name or nvm.tag[3] != config.granularity.value:
            raise ConfigurationError("NVM image was prepared for a different model or granularity")
        mode = CODE_MODES[nvm.tag[2]]
    else:
        mode = select_mode(trace, config.mode_policy)
        nvm = prepare_device(model, input, mode, config.granularity, nvm)
    return Executor(model, trace, config, nvm, mode).run()


def ample_power_trace(amplitude: float = 1e5) -> PowerTrace:
    return PowerTrace("constant", amplitude)


# --------------------------------------------------------------------------
# failure-point searches


def write_count(model: ModelSpec, input: QTensor, config: ExecConfig) -> tuple:
    """Total write attempts of one uninterrupted inference, plus its commit log."""
    nvm = NvmImage()
    nvm.commit_log = []
    rep = run_intermittent(model, input, ample_power_trace(), config, nvm)
    if not rep.completed:
        raise UnrecoverableStateError("reference run did not complete")
    return nvm.write_attempts, nvm.commit_log, rep


def commit_write_ordinals(model: ModelSpec, input: QTensor, config: ExecConfig) -> list:
    """Write ordinals that fall inside a progress commit (every word of every commit)."""
    _, log, _ = write_count(model, input, config)
    out = []
    for last, _rec in log:
        out.extend(range(last - RECORD_WORDS + 1, last + 1))
    return out


def inject_failure(model: ModelSpec, input: QTensor, config: ExecConfig, ordinal: int) -> tuple:
    """Run with one power failure before write ``ordinal``; returns (report, nvm)."""
    nvm = NvmImage()
    nvm.fail_at_write = ordinal
    rep = run_intermittent(model, input, ample_power_trace(), config, nvm)
    return rep, nvm


def failure_point_search(model: ModelSpec, input: QTensor, config: ExecConfig, ordinals=None) -> list:
    """Failure points whose resumed output differs from the uninterrupted one.

    Every write attempt of a failure-free run is tried unless ``ordinals``
    narrows the search.  Returns the offending ordinals.
    """
    from ember.model import infer_continuous

    mode = select_mode(ample_power_trace(), config.mode_policy)
    oracle = infer_continuous(model, input, mode).output
    total, _, _ = write_count(model, input, config)
    bad = []
    for j in (range(total) if ordinals is None else ordinals):
        rep, _ = inject_failure(model, input, config, j)
        if not rep.completed or rep.output != oracle:
            bad.append(j)
    return bad
