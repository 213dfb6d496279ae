"""Seeded random-trace trials compared bit-for-bit with continuous inference.

    python3 scripts/consistency_sweep.py --trials 1000 --out results/consistency.csv
"""

import argparse
import csv
import sys
import time

from ember.experiments import consistency_trial, patterned_random_model
from ember.runtime import Granularity


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--arch", default="reduced-mnist")
    parser.add_argument("--trials", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0, help="first trial seed")
    parser.add_argument("--no-inject", action="store_true", help="skip the random mid-run brown-outs")
    parser.add_argument("--out", help="per-granularity CSV; stdout when omitted")
    args = parser.parse_args()

    model = patterned_random_model(args.arch, 0)
    rows = []
    for gran in Granularity:
        t0 = time.perf_counter()
        reps = []
        match = 0
        for seed in range(args.seed, args.seed + args.trials):
            t = consistency_trial(model, seed, gran, inject=not args.no_inject)
            reps.append(t.report)
            match += bool(t.oracle_match)
        rows.append({
            "granularity": gran.value, "trials": args.trials, "oracle_match": match,
            "mean_power_cycles": round(sum(r.power_cycles for r in reps) / len(reps), 2),
            "injected_failures": sum(r.failures for r in reps),
            "gate_violations": sum(r.gate_violations for r in reps),
            "conservation_violations": sum(r.conservation_violations for r in reps),
            "seconds": round(time.perf_counter() - t0, 1),
        })
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(fh, fieldnames=list(rows[0]))
    w.writeheader()
    w.writerows(rows)
    if args.out:
        fh.close()
    if any(r["oracle_match"] != r["trials"] for r in rows):
        sys.exit(3)


if __name__ == "__main__":
    main()
