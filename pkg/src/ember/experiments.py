"""Trial runners shared by the CLI, the reproduction scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ember.arch import random_model
from ember.energy import PowerTrace
from ember.model import InferenceMode, ModelSpec, QTensor, infer_continuous, param_count
from ember.nvm import NvmImage
from ember.patterns import build_pattern_library
from ember.runtime import (
    ExecConfig,
    ExecutionReport,
    Executor,
    Granularity,
    ModePolicy,
    ample_power_trace,
    prepare_device,
    run_intermittent,
)


def patterned_random_model(arch: str, seed: int = 0) -> ModelSpec:
    """Random-weight model with its pattern library masks attached."""
    m = random_model(arch, seed)
    if any(l.patterned for l in m.layers):
        m = build_pattern_library(m).attach(m)
    return m


def random_input(model: ModelSpec, seed: int) -> QTensor:
    rng = np.random.default_rng(seed)
    return QTensor.from_float(rng.uniform(0.0, 0.999, model.input_shape), model.input_scale)


@dataclass
class Trial:
    index: int
    report: ExecutionReport
    oracle_match: Optional[bool]
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"trial": self.index, "oracle_match": self.oracle_match, **self.params}
        d.update(self.report.to_dict())
        return d


def run_trials(job: Callable[[int], Trial], trials: int, workers: int = 1) -> list:
    """Run ``job(i)`` for every trial; each trial owns its own device."""
    if workers <= 1:
        return [job(i) for i in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(job, range(trials)))


def aggregate(trials: list) -> dict:
    n = len(trials)
    done = [t for t in trials if t.report.completed]
    checked = [t for t in trials if t.oracle_match is not None]
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0
    return {
        "trials": n,
        "completion_rate": len(done) / n if n else 0.0,
        "oracle_match_rate": (sum(bool(t.oracle_match) for t in checked) / len(checked)) if checked else 0.0,
        "mean_cycles": mean([t.report.cycles_total for t in done]),
        "mean_power_cycles": mean([t.report.power_cycles for t in trials]),
        "mean_energy_consumed": mean([t.report.energy_consumed for t in trials]),
        "conservation_violations": sum(t.report.conservation_violations for t in trials),
        "gate_violations": sum(t.report.gate_violations for t in trials),
        "corrupt_loads": sum(t.report.corrupt_loads for t in trials),
        "timeouts": sum(t.report.timed_out for t in trials),
    }


def window_energy(config: ExecConfig) -> float:
    """Energy one discharge from v_on to v_off delivers, nJ."""
    return 0.5 * config.capacitance * (config.v_on ** 2 - config.v_off ** 2) * 1e9


def capacitance_for_window(energy_nj: float, v_on: float = 2.8, v_off: float = 1.8) -> float:
    return 2.0 * energy_nj * 1e-9 / (v_on ** 2 - v_off ** 2)


def largest_section(model: ModelSpec, mode: InferenceMode, config: ExecConfig) -> float:
    """Energy the device must hold to boot, enter a layer and run its largest unit."""
    plan_cfg = dataclasses.replace(config, capacitance=1.0, initial_voltage=0.0)
    nvm = prepare_device(model, random_input(model, 0), mode, config.granularity)
    ex = Executor(model, ample_power_trace(), plan_cfg, nvm, mode)
    return ex.e_boot + max(ex.e_trans) + max(ex.e_unit)


def full_inference_energy(model: ModelSpec, mode: InferenceMode, config: Optional[ExecConfig] = None) -> float:
    """Energy (nJ) of one uninterrupted protected inference."""
    config = dataclasses.replace(config or ExecConfig(), mode_policy=ModePolicy(mode.value),
                                 initial_voltage=0.0, capacitance=1e-3, max_sim_time=1e12)
    rep = run_intermittent(model, random_input(model, 0), ample_power_trace(1e7), config)
    return rep.energy_consumed


# --------------------------------------------------------------------------
# consistency under random traces


def random_trace_config(model: ModelSpec, seed: int, granularity: Granularity) -> tuple:
    """A seeded (trace, config, mode) triple that forces several power failures."""
    rng = np.random.default_rng(seed)
    mode = InferenceMode.FULL if rng.random() < 0.5 else InferenceMode.LOW_ENERGY
    base = ExecConfig(granularity=granularity, mode_policy=ModePolicy(mode.value), max_sim_time=1e12)
    need = largest_section(model, mode, base)
    cap = capacitance_for_window(need * rng.uniform(1.3, 4.0))
    kind = ["square", "sine", "random", "constant"][int(rng.integers(0, 4))]
    period = float(rng.uniform(200.0, 20_000.0))
    amplitude = float(rng.uniform(200.0, 20_000.0))
    duty = float(rng.uniform(0.1, 0.9))
    trace = PowerTrace(kind, amplitude, period, duty, int(rng.integers(0, 2 ** 31)))
    return trace, dataclasses.replace(base, capacitance=cap), mode


def consistency_trial(model: ModelSpec, seed: int, granularity: Granularity, inject: bool = True) -> Trial:
    """One seeded random-trace run compared bit-for-bit with the continuous oracle.

    With ``inject`` half the trials also lose power at a random write, as an
    unexpected brown-out would.
    """
    trace, config, mode = random_trace_config(model, seed, granularity)
    x = random_input(model, seed)
    nvm = NvmImage()
    rng = np.random.default_rng(seed + 7919)
    if inject and rng.random() < 0.5:
        nvm.fail_at_write = int(rng.integers(0, 2000))
    rep = run_intermittent(model, x, trace, config, nvm)
    oracle = infer_continuous(model, x, mode).output
    match = rep.completed and rep.output == oracle
    return Trial(seed, rep, match, {"granularity": granularity.value, "waveform": trace.kind})


# --------------------------------------------------------------------------
# completion asymmetry


def asymmetry_setup(model: ModelSpec, fraction: float = 0.1, periods: int = 200,
                    period: float = 20_000.0, duty: float = 0.5) -> tuple:
    """Square-wave trace and capacitor where one on-period delivers ``fraction``
    of a full inference's energy.

    The on-phase harvest and the capacitor's usable swing (v_max down to
    v_off) are both set to that amount, so no power cycle can carry more.
    """
    e_full = full_inference_energy(model, InferenceMode.FULL)
    per_cycle = fraction * e_full
    amplitude = per_cycle * 1000.0 / (duty * period)
    cap = 2.0 * per_cycle * 1e-9 / (3.6 ** 2 - 1.8 ** 2)
    trace = PowerTrace("square", amplitude, period, duty)
    config = ExecConfig(capacitance=cap, max_sim_time=periods * period)
    return trace, config, e_full


def asymmetry_trial(model: ModelSpec, trace: PowerTrace, config: ExecConfig, seed: int, baseline: str) -> Trial:
    x = random_input(model, seed)
    cfg = dataclasses.replace(config, baseline=baseline)
    rep = run_intermittent(model, x, trace, cfg)
    oracle = infer_continuous(model, x, InferenceMode.FULL).output
    match = (rep.output == oracle) if rep.completed else None
    return Trial(seed, rep, match, {"baseline": baseline})


# --------------------------------------------------------------------------
# latency per mode


def cycle_ratio(model: ModelSpec, config: Optional[ExecConfig] = None, seed: int = 0) -> dict:
    """Total cycles of one inference per mode under ample power, and their ratio."""
    config = config or ExecConfig()
    x = random_input(model, seed)
    out = {}
    for mode in InferenceMode:
        cfg = dataclasses.replace(config, mode_policy=ModePolicy(mode.value), capacitance=1e-3, max_sim_time=1e12)
        rep = run_intermittent(model, x, ample_power_trace(1e7), cfg)
        if not rep.completed:
            raise RuntimeError(f"{model.name}: {mode.value} run did not complete")
        out[mode.value] = rep.cycles_total
    out["ratio"] = out["full"] / out["low_energy"]
    return out


def param_table(models: dict) -> list:
    rows = []
    for name, m in models.items():
        rows.append({"model": name, "full": param_count(m, InferenceMode.FULL),
                     "low_energy": param_count(m, InferenceMode.LOW_ENERGY)})
    return rows
