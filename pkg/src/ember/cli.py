"""Command-line front end: ``ember <subcommand> [--flags]``.

Exit codes: 0 success, 1 pipeline failure, 2 usage or input error, 3 consistency violation
(protected output differs from the continuous oracle), 4 simulation timeout.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ember import arch as archmod
from ember.energy import CostModel, PowerTrace, load_trace, save_trace
from ember.errors import EmberError, TrainingError
from ember.model import InferenceMode, QTensor, infer_continuous, param_count, quantize_values

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_INCONSISTENT, EXIT_TIMEOUT = 0, 1, 2, 3, 4

log = logging.getLogger("ember")


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("EMBER_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"EMBER_SEED must be an integer, got {env!r}") from None


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _parent(path: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def _mode(text: str) -> InferenceMode:
    return InferenceMode(text.replace("-", "_"))


# --------------------------------------------------------------------------
# train / concentrate / quantize / infer


def cmd_train(args) -> int:
    from ember.datasets import load_dataset
    from ember.modelfile import save_model
    from ember.train import PipelineConfig, TrainConfig, run_pipeline, write_log

    seed = _seed(args)
    if args.data_dir is not None:
        _existing(args.data_dir, "dataset path")
    arch_name = args.arch or archmod.DATASET_ARCH.get(args.dataset)
    if arch_name is None:
        raise UsageError(f"no default architecture for dataset {args.dataset!r}")
    data = load_dataset(args.dataset, args.data_dir, seed)
    if args.train_samples or args.test_samples:
        data = data.subset(args.train_samples, args.test_samples)
    cfg = PipelineConfig(
        baseline=TrainConfig(args.learning_rate, args.epochs, args.batch_size, seed),
        phase1=TrainConfig(args.finetune_learning_rate, args.finetune_epochs, args.batch_size, seed, "phase1"),
        phase2=TrainConfig(args.finetune_learning_rate, args.finetune_epochs, args.batch_size, seed, "phase2"),
        library_size=args.library_size,
        skip_finetune=args.skip_finetune,
        quantized_eval_samples=args.eval_samples,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_suffix(".jsonl")
    result = run_pipeline(arch_name, data, cfg, seed)
    save_model(result.qmodel, out)
    records = result.log + [{"stage": "params", "model": result.qmodel.name,
                             "full": param_count(result.qmodel, InferenceMode.FULL),
                             "low_energy": param_count(result.qmodel, InferenceMode.LOW_ENERGY)}]
    write_log(records, log_path)
    if args.checkpoint:
        save_checkpoint(result.float_model, args.checkpoint)
    summary = {"model": str(out), "arch": arch_name, "dataset": data.name,
               "params_full": param_count(result.qmodel, InferenceMode.FULL),
               "params_low_energy": param_count(result.qmodel, InferenceMode.LOW_ENERGY),
               **{f"acc_{k}": v for k, v in result.accuracies.items()}}
    print(json.dumps(summary))
    return EXIT_OK


def save_checkpoint(model, path):
    arrays = {}
    for l in model.params():
        arrays[f"w{l.id}"] = l.weights
        arrays[f"b{l.id}"] = l.bias
    np.savez(path, arch=np.array(model.name), **arrays)


def load_checkpoint(path):
    from ember.train import FloatModel

    with np.load(path) as z:
        fm = FloatModel.from_architecture(str(z["arch"]))
        for l in fm.params():
            l.weights = z[f"w{l.id}"].astype(np.float64)
            l.bias = z[f"b{l.id}"].astype(np.float64)
    return fm


def _load_model_arg(args):
    from ember.modelfile import load_model

    if getattr(args, "model", None):
        return load_model(_existing(args.model, "model file"))
    if getattr(args, "arch", None):
        from ember.experiments import patterned_random_model

        return patterned_random_model(args.arch, _seed(args))
    raise UsageError("give --model FILE or --arch NAME")


def cmd_concentrate(args) -> int:
    from ember.modelfile import save_model
    from ember.patterns import build_pattern_library, concentration_ratio

    model = _load_model_arg(args)
    lib = build_pattern_library(model, library_size=args.library_size)
    model = lib.attach(model)
    ratios = concentration_ratio(model, lib)
    _parent(args.out)
    save_model(model, args.out, packed=args.packed)
    print(json.dumps({"out": args.out, "patterns": len(lib.patterns),
                      "ratios": {str(k): round(v, 4) for k, v in ratios.items()},
                      "params_full": param_count(model, InferenceMode.FULL),
                      "params_low_energy": param_count(model, InferenceMode.LOW_ENERGY)}))
    return EXIT_OK


def cmd_quantize(args) -> int:
    from ember.datasets import load_dataset
    from ember.modelfile import save_model
    from ember.patterns import build_pattern_library
    from ember.train import quantize_export

    fm = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    calib = None
    if args.dataset:
        calib = load_dataset(args.dataset, args.data_dir, _seed(args)).x_train[:args.calibration_samples]
    masks = None
    if any(l.patterned for l in fm.layers):
        masks = build_pattern_library(fm, library_size=args.library_size).masks(fm)
    q = quantize_export(fm, calib, masks)
    _parent(args.out)
    save_model(q, args.out, packed=args.packed)
    print(json.dumps({"out": args.out, "layers": len(q.layers)}))
    return EXIT_OK


def _input_arg(args, model) -> QTensor:
    if args.input:
        x = np.load(_existing(args.input, "input file"))
    elif args.data_dir or args.dataset:
        from ember.datasets import load_dataset

        ds = load_dataset(args.dataset or "mnist", args.data_dir, _seed(args))
        x = ds.x_test[args.index]
    else:
        from ember.experiments import random_input

        return random_input(model, _seed(args))
    x = np.asarray(x, dtype=np.float64).reshape(model.input_shape)
    return QTensor(x.shape, quantize_values(x, model.input_scale), model.input_scale)


def cmd_infer(args) -> int:
    model = _load_model_arg(args)
    x = _input_arg(args, model)
    res = infer_continuous(model, x, _mode(args.mode))
    print(json.dumps({"predicted_class": res.predicted_class, "output": res.output.data.tolist(),
                      "output_scale": res.output.scale, "macs": res.tally.macs}))
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate / trace-gen / report


def _trace_from_args(args) -> PowerTrace:
    if args.trace:
        return load_trace(_existing(args.trace, "trace file"))
    return PowerTrace(args.waveform, args.amplitude, args.period, args.duty, _seed(args))


def _cost_from_args(args) -> CostModel:
    values = {}
    if args.cost_config:
        path = _existing(args.cost_config, "cost config")
        try:
            values.update(json.loads(path.read_text()))
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise UsageError(f"{path}: not a JSON object of cost fields ({exc})") from None
    for f in dataclasses.fields(CostModel):
        v = getattr(args, f"cost_{f.name}", None)
        if v is not None:
            values[f.name] = v
    try:
        return CostModel.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"cost model: {exc}") from None


def cmd_simulate(args) -> int:
    from ember.experiments import Trial, aggregate, random_input, run_trials
    from ember.runtime import ExecConfig, ModePolicy, run_intermittent, select_mode

    if args.trials < 1:
        raise UsageError("--trials must be at least 1")
    model = _load_model_arg(args)
    seed = _seed(args)
    trace = _trace_from_args(args)
    cfg = ExecConfig(
        granularity=args.granularity, protection=args.protection, mode_policy=ModePolicy.parse(args.mode),
        max_sim_time=args.max_sim_time, cost=_cost_from_args(args), capacitance=args.capacitance,
        baseline=args.baseline,
    )
    fixed_input = _input_arg(args, model) if (args.input or args.data_dir) else None

    def job(i: int) -> Trial:
        x = fixed_input if fixed_input is not None else random_input(model, seed + i)
        # random traces extend lazily; a private copy keeps threaded trials deterministic
        rep = run_intermittent(model, x, copy.deepcopy(trace), cfg)
        oracle = infer_continuous(model, x, rep.mode_used).output
        match = (rep.output == oracle) if rep.completed else None
        return Trial(i, rep, match, {"model": model.name, "seed": seed + i})

    trials = run_trials(job, args.trials, args.workers)
    agg = aggregate(trials)
    agg.update({"model": model.name, "mode": select_mode(trace, cfg.mode_policy).value,
                "granularity": cfg.granularity.value, "protection": cfg.protection.value,
                "baseline": cfg.baseline,
                "params_full": param_count(model, InferenceMode.FULL),
                "params_low_energy": param_count(model, InferenceMode.LOW_ENERGY)})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        stem = args.name or f"{model.name}_{agg['mode']}_{cfg.granularity.value}_{cfg.baseline}"
        with open(out / f"{stem}.trials.jsonl", "w") as fh:
            for t in trials:
                fh.write(json.dumps(t.to_dict()) + "\n")
        (out / f"{stem}.summary.json").write_text(json.dumps(agg, indent=1))
    print(json.dumps(agg))
    protected = cfg.protection.value == "on" and cfg.baseline == "none"
    if protected and any(t.oracle_match is False for t in trials):
        return EXIT_INCONSISTENT
    if protected and agg["timeouts"]:
        return EXIT_TIMEOUT
    return EXIT_OK


def cmd_trace_gen(args) -> int:
    trace = PowerTrace(args.waveform, args.amplitude, args.period, args.duty, _seed(args))
    _parent(args.out)
    save_trace(trace, args.out, args.duration, args.step)
    print(json.dumps({"out": args.out, "mean_power_uW": trace.mean_power(0.0, args.duration)}))
    return EXIT_OK


class ReportParseError(EmberError):
    pass


def _read_json_lines(path: Path) -> list:
    rows = []
    offset = 0
    with open(path, "rb") as fh:
        for line in fh:
            text = line.strip()
            if text:
                try:
                    rows.append(json.loads(text))
                except json.JSONDecodeError as exc:
                    raise ReportParseError(f"{path}: malformed record at byte offset {offset + exc.pos}") from None
            offset += len(line)
    return rows


def _read_summary(path: Path) -> dict:
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ReportParseError(f"{path}: malformed summary at byte offset {exc.pos}") from None


def build_report(in_dir: Path) -> dict:
    """Tables from every ``*.summary.json`` and training ``*.jsonl`` log in ``in_dir``."""
    summaries = [(p, _read_summary(p)) for p in sorted(in_dir.glob("*.summary.json"))]
    accuracy_rows, cycle_rows, param_rows = [], [], []
    for p in sorted(in_dir.glob("*.jsonl")):
        if p.name.endswith(".trials.jsonl"):
            _read_json_lines(p)
            continue
        for r in _read_json_lines(p):
            if not isinstance(r, dict):
                raise ReportParseError(f"{p}: record is not an object")
            if r.get("stage") == "checkpoint":
                accuracy_rows.append({"run": p.stem, "checkpoint": r["name"], "epoch": "", "accuracy": r["accuracy"]})
            elif "epoch" in r and "accuracy" in r:
                accuracy_rows.append({"run": p.stem, "checkpoint": r.get("stage", ""), "epoch": r["epoch"],
                                      "accuracy": r["accuracy"]})
            elif r.get("stage") == "params":
                param_rows.append({"model": r["model"], "full": r["full"], "low_energy": r["low_energy"]})
    by_model: dict = {}
    for p, s in summaries:
        if s.get("baseline", "none") != "none":
            continue
        by_model.setdefault(s["model"], {})[s["mode"]] = s
    seen = {r["model"] for r in param_rows}
    for name, modes in sorted(by_model.items()):
        some = next(iter(modes.values()))
        if name not in seen:
            param_rows.append({"model": name, "full": some.get("params_full"),
                               "low_energy": some.get("params_low_energy")})
        row = {"model": name,
               "full_cycles": modes.get("full", {}).get("mean_cycles"),
               "low_energy_cycles": modes.get("low_energy", {}).get("mean_cycles")}
        if row["full_cycles"] and row["low_energy_cycles"]:
            row["ratio"] = row["full_cycles"] / row["low_energy_cycles"]
        cycle_rows.append(row)
    return {"accuracy": accuracy_rows, "cycles": cycle_rows, "params": param_rows}


def _write_csv(path: Path, rows: list, fields: list):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def cmd_report(args) -> int:
    in_dir = _existing(args.input_dir, "report directory")
    tables = build_report(in_dir)
    out = Path(args.out or in_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "accuracy.csv", tables["accuracy"], ["run", "checkpoint", "epoch", "accuracy"])
    _write_csv(out / "cycles.csv", tables["cycles"], ["model", "full_cycles", "low_energy_cycles", "ratio"])
    _write_csv(out / "params.csv", tables["params"], ["model", "full", "low_energy"])
    print(json.dumps(tables))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ember", description="Intermittent DNN inference simulator and trainer.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="defaults to $EMBER_SEED, then 0")

    t = sub.add_parser("train", help="baseline -> prune -> fine-tune -> export")
    common(t)
    t.add_argument("--dataset", required=True, choices=["mnist", "har", "gtsrb"])
    t.add_argument("--arch", choices=sorted(archmod.ARCHITECTURES))
    t.add_argument("--data-dir")
    t.add_argument("--out", required=True)
    t.add_argument("--log")
    t.add_argument("--checkpoint", help="also save float weights (.npz)")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--finetune-epochs", type=int, default=6)
    t.add_argument("--learning-rate", type=float, default=0.05)
    t.add_argument("--finetune-learning-rate", type=float, default=0.02)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--library-size", type=int, default=10)
    t.add_argument("--train-samples", type=int)
    t.add_argument("--test-samples", type=int)
    t.add_argument("--eval-samples", type=int, help="cap on test samples for the Q15 accuracy check")
    t.add_argument("--skip-finetune", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("concentrate", help="build a pattern library and attach masks")
    common(c)
    c.add_argument("--model")
    c.add_argument("--arch", choices=sorted(archmod.ARCHITECTURES))
    c.add_argument("--out", required=True)
    c.add_argument("--library-size", type=int, default=10)
    c.add_argument("--packed", action="store_true")
    c.set_defaults(func=cmd_concentrate)

    q = sub.add_parser("quantize", help="float checkpoint -> Q15 model file")
    common(q)
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--dataset", choices=["mnist", "har", "gtsrb"])
    q.add_argument("--data-dir")
    q.add_argument("--calibration-samples", type=int, default=500)
    q.add_argument("--library-size", type=int, default=10)
    q.add_argument("--packed", action="store_true")
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("infer", help="continuous-power inference of one input")
    common(i)
    i.add_argument("--model")
    i.add_argument("--arch", choices=sorted(archmod.ARCHITECTURES))
    i.add_argument("--input", help=".npy array of the input shape, values in [0, 1)")
    i.add_argument("--dataset", choices=["mnist", "har", "gtsrb"])
    i.add_argument("--data-dir")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--mode", default="full", choices=["full", "low-energy"])
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("simulate", help="seeded intermittent-power trials")
    common(s)
    s.add_argument("--model")
    s.add_argument("--arch", choices=sorted(archmod.ARCHITECTURES))
    s.add_argument("--input")
    s.add_argument("--dataset", choices=["mnist", "har", "gtsrb"])
    s.add_argument("--data-dir")
    s.add_argument("--index", type=int, default=0)
    s.add_argument("--trace", help="two-column trace file (time_us power_uW)")
    s.add_argument("--waveform", default="constant", choices=["constant", "square", "sine", "random"])
    s.add_argument("--amplitude", type=float, default=1e5, help="uW")
    s.add_argument("--period", type=float, default=10_000.0, help="us")
    s.add_argument("--duty", type=float, default=0.5)
    s.add_argument("--granularity", default="element", choices=["mac", "element", "row"])
    s.add_argument("--protection", default="on", choices=["on", "war_injection_off"])
    s.add_argument("--mode", default="full", help="full | low-energy | auto:<uW>[:<window_us>]")
    s.add_argument("--baseline", default="none", choices=["none", "restart"])
    s.add_argument("--capacitance", type=float, default=100e-6, help="farads")
    s.add_argument("--max-sim-time", type=float, default=60e6, help="us")
    s.add_argument("--cost-config", help="JSON object of CostModel fields")
    for f in dataclasses.fields(CostModel):
        s.add_argument(f"--cost-{f.name.replace('_', '-')}", dest=f"cost_{f.name}", type=type(f.default))
    s.add_argument("--trials", type=int, default=1)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.add_argument("--name", help="file stem for the written reports")
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("trace-gen", help="write a harvest trace file")
    common(g)
    g.add_argument("--waveform", default="square", choices=["constant", "square", "sine", "random"])
    g.add_argument("--amplitude", type=float, default=1000.0)
    g.add_argument("--period", type=float, default=10_000.0)
    g.add_argument("--duty", type=float, default=0.5)
    g.add_argument("--duration", type=float, default=100_000.0)
    g.add_argument("--step", type=float, default=100.0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_trace_gen)

    r = sub.add_parser("report", help="CSV tables from simulate/train outputs")
    r.add_argument("--in", dest="input_dir", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"error: training stage {exc.stage or '?'}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except EmberError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
