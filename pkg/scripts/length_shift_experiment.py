"""Calibrate on short trajectories, test on long ones sharing the token budget.

Compares violation fractions of both thresholds against the unshifted
baseline on identical validation draws.
"""

import argparse
from dataclasses import replace
from pathlib import Path

from conformal_stop.harness import SweepSpec, ablation_shift, violation_fraction, write_report
from conformal_stop.synth import SolvableDynamics, SynthConfig, UnsolvableDynamics, generate, length_shift_pair


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--population", type=int, default=2000)
    ap.add_argument("--splits", type=int, default=100)
    ap.add_argument("--validation-size", type=int, default=50)
    ap.add_argument("--out", default="results/shift")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = SynthConfig(population=args.population, seed=21, steps=20, budget_tokens=4000,
                       solvable=SolvableDynamics(midpoint=6, midpoint_jitter=3),
                       unsolvable=UnsolvableDynamics(guess_prob=0.002))
    short_cfg, long_cfg = length_shift_pair(base)
    short, long = generate(short_cfg), generate(replace(long_cfg, seed=22))
    spec = SweepSpec(splits=args.splits, validation_size=args.validation_size,
                     corrections=("naive", "ucb"), seed=7, delta=0.1)

    for side in ("lower_fn", "upper_fp"):
        shifted = ablation_shift(short, long, spec, side)
        baseline = ablation_shift(short, short, spec, side)
        write_report(shifted, out / f"{side}_shifted.csv")
        write_report(baseline, out / f"{side}_baseline.csv")
        for corr in spec.corrections:
            print(f"{side:<9s} {corr:<6s} shifted {violation_fraction(shifted, corr):.3f} "
                  f"baseline {violation_fraction(baseline, corr):.3f}")


if __name__ == "__main__":
    main()
