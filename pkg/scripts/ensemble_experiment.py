"""Two-channel ensemble where one channel lags the other by a few steps.

Reports how often the harness picks each channel across the epsilon sweep.
"""

import argparse
from collections import Counter
from pathlib import Path

from conformal_stop.harness import SweepSpec, efficiency_sweep, write_report
from conformal_stop.signals import SignalSpec
from conformal_stop.synth import SolvableDynamics, SynthConfig, UnsolvableDynamics, generate, with_lagged_channel


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lag", type=int, default=3)
    ap.add_argument("--splits", type=int, default=20)
    ap.add_argument("--out", default="results/ensemble")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = generate(SynthConfig(
        population=400, seed=13, signal_name="fast",
        solvable=SolvableDynamics(midpoint=7, steepness=50.0, noise=0.0, midpoint_jitter=3),
        unsolvable=UnsolvableDynamics(level=0.3, noise=0.0, guess_prob=0.0, level_spread=0.1),
    ))
    ds = with_lagged_channel(base, "fast", "slow", args.lag)
    spec = SweepSpec(splits=args.splits, validation_size=50, corrections=("naive", "ucb"), seed=4, delta=0.1)
    rows = efficiency_sweep(ds, spec, "upper_only", [SignalSpec("fast"), SignalSpec("slow")])
    write_report(rows, out / "rows.csv")
    picks = Counter(r.signal_selected or "infeasible" for r in rows)
    for name, count in sorted(picks.items()):
        print(f"{name:<10s} {count}")


if __name__ == "__main__":
    main()
