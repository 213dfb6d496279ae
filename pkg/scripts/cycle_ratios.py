"""Total clock cycles of one inference in full and low-energy mode.

Runs each reference network once per mode under ample power with the
default cost model (or a JSON override) and reports the full/low ratio.

    python3 scripts/cycle_ratios.py --out results/cycles.csv
"""

import argparse
import csv
import json
import sys

import numpy as np

from ember.energy import CostModel
from ember.experiments import cycle_ratio, patterned_random_model
from ember.runtime import ExecConfig

ARCHS = ("table1-mnist", "table1-har", "table1-gtsrb")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", help="CSV path; stdout when omitted")
    parser.add_argument("--cost-config", help="JSON object of cost model fields")
    parser.add_argument("--granularity", default="element", choices=["mac", "element", "row"])
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    cost = CostModel.from_mapping(json.load(open(args.cost_config))) if args.cost_config else CostModel()
    cfg = ExecConfig(granularity=args.granularity, cost=cost)
    rows = []
    for arch in ARCHS:
        r = cycle_ratio(patterned_random_model(arch, args.seed), cfg, args.seed)
        rows.append({"model": arch, "full_cycles": r["full"], "low_energy_cycles": r["low_energy"],
                     "ratio": round(r["ratio"], 4)})
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(fh, fieldnames=["model", "full_cycles", "low_energy_cycles", "ratio"])
    w.writeheader()
    w.writerows(rows)
    if args.out:
        fh.close()
    print(f"mean ratio {np.mean([r['ratio'] for r in rows]):.3f}", file=sys.stderr)


if __name__ == "__main__":
    main()
