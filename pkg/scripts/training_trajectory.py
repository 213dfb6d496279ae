"""Accuracy after each stage of baseline, prune, two-phase fine-tune and export.

MNIST is read from IDX files; HAR from the UCI text layout when
``--har-dir`` is given, otherwise from the synthetic stand-in; GTSRB is
always synthetic.  Writes ``trajectory.csv`` plus one JSON-lines training
log per dataset, which ``ember report`` also understands.

    python3 scripts/training_trajectory.py --mnist-dir data/mnist5k --out results
"""

import argparse
import csv
import time
from pathlib import Path

from ember.arch import DATASET_ARCH
from ember.datasets import load_dataset
from ember.model import InferenceMode, param_count
from ember.train import PipelineConfig, run_pipeline, write_log


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--mnist-dir", default="data/mnist5k")
    parser.add_argument("--har-dir")
    parser.add_argument("--datasets", default="mnist,har,gtsrb")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="results")
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"mnist": args.mnist_dir, "har": args.har_dir, "gtsrb": None}
    rows = []
    for name in args.datasets.split(","):
        data = load_dataset(name, paths[name], args.seed)
        t0 = time.perf_counter()
        res = run_pipeline(DATASET_ARCH[name], data, PipelineConfig(), args.seed)
        log = res.log + [{"stage": "params", "model": res.qmodel.name,
                          "full": param_count(res.qmodel, InferenceMode.FULL),
                          "low_energy": param_count(res.qmodel, InferenceMode.LOW_ENERGY)}]
        write_log(log, out / f"train_{name}.jsonl")
        for stage, acc in res.accuracies.items():
            rows.append({"dataset": data.name, "checkpoint": stage, "accuracy": round(acc, 4)})
        print(f"{data.name}: " + ", ".join(f"{k} {v:.3f}" for k, v in res.accuracies.items())
              + f" ({time.perf_counter() - t0:.0f}s)")
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["dataset", "checkpoint", "accuracy"])
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
