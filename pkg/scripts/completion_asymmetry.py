"""Restart-from-scratch versus progress-preserving execution on a weak supply.

The trace is a square wave (20 ms period, 50% duty).  Its amplitude is set
so one on-phase harvests ``--fraction`` of a full inference's energy, and
the capacitor is sized so its whole swing from v_max down to v_off holds the
same amount.  No single power cycle can therefore finish an inference, and
a device that restarts at layer 0 after every failure never completes.

    python3 scripts/completion_asymmetry.py --trials 100
"""

import argparse
import json

from ember.experiments import aggregate, asymmetry_setup, asymmetry_trial, patterned_random_model


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--arch", default="reduced-mnist")
    parser.add_argument("--trials", type=int, default=100)
    parser.add_argument("--fraction", type=float, default=0.1)
    parser.add_argument("--periods", type=int, default=200, help="time budget in trace periods")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="JSON summary path")
    args = parser.parse_args()

    model = patterned_random_model(args.arch, args.seed)
    trace, cfg, e_full = asymmetry_setup(model, args.fraction, args.periods)
    result = {"model": args.arch, "full_inference_nJ": e_full,
              "trace": {"waveform": trace.kind, "amplitude_uW": trace.amplitude,
                        "period_us": trace.period, "duty": trace.duty},
              "capacitance_F": cfg.capacitance, "budget_us": cfg.max_sim_time}
    for baseline in ("restart", "none"):
        trials = [asymmetry_trial(model, trace, cfg, args.seed + i, baseline) for i in range(args.trials)]
        agg = aggregate(trials)
        result[baseline] = {k: agg[k] for k in ("completion_rate", "oracle_match_rate", "mean_power_cycles")}
    text = json.dumps(result, indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(text)


if __name__ == "__main__":
    main()
