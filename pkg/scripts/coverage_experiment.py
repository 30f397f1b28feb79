"""Monte-Carlo coverage of the fp-risk guarantee on a synthetic pool.

Calibrates on many random validation draws and scores every selected
threshold against the whole pool's risk. Writes one CSV of sweep rows per
validation size plus a summary table.
"""

import argparse
import csv
from pathlib import Path

from conformal_stop.calibrate import build_grid, evaluate_candidates
from conformal_stop.harness import SweepSpec, coverage_sweep, violation_fraction, write_report
from conformal_stop.losses import LossKind, column_means
from conformal_stop.signals import SignalSpec
from conformal_stop.synth import SynthConfig, generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--population", type=int, default=10_000)
    ap.add_argument("--splits", type=int, default=200)
    ap.add_argument("--sizes", type=int, nargs="+", default=[8, 50])
    ap.add_argument("--delta", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--out", default="results/coverage")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pool = generate(SynthConfig(population=args.population, seed=args.seed))
    eps = tuple(round(0.05 * k, 2) for k in range(1, 20))
    specs = [SignalSpec("confidence")]

    summary = []
    for n in args.sizes:
        spec = SweepSpec(epsilons=eps, splits=args.splits, validation_size=n,
                         corrections=("naive", "ucb", "ucb_union"), seed=5, delta=args.delta)
        table = evaluate_candidates(pool, specs, build_grid(pool, specs, spec.grid),
                                    LossKind.FALSE_POSITIVE_UPPER, LossKind.EFFICIENCY_UPPER)
        risk = {(s, float(p)): float(r)
                for s, p, r in zip(table.signals, table.params, column_means(table.risk))}
        rows = coverage_sweep(pool, spec, "upper_fp", specs)
        write_report(rows, out / f"rows_n{n}.csv")
        for corr in spec.corrections:
            v = violation_fraction(rows, corr, risk)
            summary.append({"validation_size": n, "correction": corr, "violation_fraction": v})
            print(f"n={n:<4d} {corr:<10s} violation fraction {v:.4f}")

    with (out / "summary.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(summary[0]))
        w.writeheader()
        w.writerows(summary)


if __name__ == "__main__":
    main()
