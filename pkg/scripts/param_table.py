"""Full and low-energy parameter counts of the three reference networks.

    python3 scripts/param_table.py --out results/params.csv
"""

import argparse
import csv
import sys

from ember.experiments import param_table, patterned_random_model

ARCHS = ("table1-mnist", "table1-har", "table1-gtsrb")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", help="CSV path; stdout when omitted")
    parser.add_argument("--seed", type=int, default=0, help="seed of the random weights the masks are fit to")
    args = parser.parse_args()

    rows = param_table({a: patterned_random_model(a, args.seed) for a in ARCHS})
    for r in rows:
        r["ratio"] = round(r["low_energy"] / r["full"], 4)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.DictWriter(fh, fieldnames=["model", "full", "low_energy", "ratio"])
    w.writeheader()
    w.writerows(rows)
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
