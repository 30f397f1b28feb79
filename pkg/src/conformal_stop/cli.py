"""Command-line entry point: ``conformal-stop <command> [options]``.

Commands: generate, ingest-check, calibrate, sweep, report-summary. Options
may also come from ``--config FILE`` (YAML or JSON, keys are the long option
names with underscores); flags given on the command line win. Every command
writes its resolved configuration next to its output.

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 no feasible pair.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from . import harness
from .calibrate import (
    CalibrationError,
    GridMode,
    RiskBudget,
    build_grid,
    calibrate,
    calibrate_dual,
    normalise_correction,
)
from .losses import LossKind
from .signals import SignalSpec, default_spec
from .synth import SolvableDynamics, SynthConfig, UnsolvableDynamics, generate
from .trajectory import IngestError, emit, ingest, ingest_with_report

log = logging.getLogger("conformal_stop")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2, 3


class UsageError(Exception):
    pass


def parse_epsilons(text: str) -> list[float]:
    """``start:stop:step`` (inclusive) or a comma-separated list."""
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        if step <= 0:
            raise UsageError("epsilon step must be positive")
        count = int(round((stop - start) / step)) + 1
        return [round(start + k * step, 10) for k in range(count)]
    return [float(x) for x in text.split(",") if x]


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    text = p.read_text(encoding="utf-8")
    data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise UsageError(f"config {p} must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Defaults < config file < command line."""
    cfg = _load_config(getattr(args, "config", None))
    out = dict(defaults)
    out.update({k: v for k, v in cfg.items()})
    for k, v in vars(args).items():
        if k in ("func", "config", "command"):
            continue
        if v is not None:
            out[k] = v
    return out


def _write_resolved(out: Path, resolved: dict, suffix=".config.json") -> None:
    path = out.with_name(out.name + suffix)
    path.write_text(json.dumps(resolved, sort_keys=True, indent=2, default=str) + "\n", encoding="utf-8")


def _signals(resolved: dict, dataset) -> list[SignalSpec]:
    raw = resolved.get("signal") or []
    if isinstance(raw, str):
        raw = [raw]
    if not raw:
        return [default_spec(n) for n in dataset.signal_catalog]
    return [SignalSpec.parse(s) if ":" in s else default_spec(s) for s in raw]


def _require_input(resolved: dict) -> Path:
    if not resolved.get("in_"):
        raise UsageError("--in is required")
    path = Path(resolved["in_"])
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    resolved = _resolve(args, {})
    if resolved.get("seed") is None:
        raise UsageError("--seed is required for generate")
    if not resolved.get("out"):
        raise UsageError("--out is required")
    keys = {
        "population", "solvable_fraction", "steps", "tokens_per_step", "budget_tokens",
        "seed", "signal_name", "id_prefix", "flicker_prob",
    }
    kwargs = {k: resolved[k] for k in keys if k in resolved}
    if "solvable" in resolved:
        kwargs["solvable"] = SolvableDynamics(**resolved["solvable"])
    if "unsolvable" in resolved:
        kwargs["unsolvable"] = UnsolvableDynamics(**resolved["unsolvable"])
    if resolved.get("guess_prob") is not None:
        kwargs["unsolvable"] = replace(kwargs.get("unsolvable", UnsolvableDynamics()),
                                       guess_prob=resolved["guess_prob"])
    try:
        config = SynthConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    out = Path(resolved["out"])
    dataset = generate(config)
    emit(dataset, out)
    _write_resolved(out, {"command": "generate", **config.to_dict()})
    print(f"wrote {len(dataset)} trajectories to {out}")
    return EXIT_OK


def cmd_ingest_check(args) -> int:
    resolved = _resolve(args, {"strictness": "strict"})
    path = _require_input(resolved)
    dataset, drops = ingest_with_report(path, resolved["strictness"])
    solvable = sum(t.solvable for t in dataset)
    print(f"trajectories: {len(dataset)}")
    print(f"signals: {', '.join(dataset.signal_catalog) or '-'}")
    print(f"solvable: {solvable}  unsolvable: {len(dataset) - solvable}")
    print(f"dropped: {len(drops)}")
    for d in drops:
        print(f"  line {d.line}: {d.reason}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    resolved = _resolve(args, {"delta": 0.05, "correction": "ucb", "grid": "uniform:50", "c_count": 32})
    path = _require_input(resolved)
    dataset = ingest(path)
    specs = _signals(resolved, dataset)
    correction = normalise_correction(resolved["correction"])
    grid_mode = GridMode.parse(resolved["grid"])
    lower_mode = GridMode(grid_mode.kind, int(resolved["c_count"]))
    mode = resolved.get("mode")
    dual = mode == "dual" or (resolved.get("eps_plus") is not None and resolved.get("eps_minus") is not None)
    records = []
    if dual:
        if resolved.get("eps_plus") is None or resolved.get("eps_minus") is None:
            raise UsageError("dual calibration needs --eps-plus and --eps-minus")
        if len(specs) != 1:
            raise UsageError("dual calibration monitors exactly one --signal")
        grids = (build_grid(dataset, specs, grid_mode, "upper"),
                 build_grid(dataset, specs, lower_mode, "lower"))
        result = calibrate_dual(dataset, specs[0], grids, resolved["eps_plus"], resolved["eps_minus"],
                                resolved["delta"], correction)
        for stage in (result.upper, result.lower):
            if stage is not None:
                records.append({"type": "calibration", "stage": stage.side, **stage.to_dict()})
        feasible = result.policy is not None
        if feasible:
            p = result.policy
            print(f"selected signal={p.signal} lambda_plus={p.upper.lambda_plus:.6g} c={p.lower.c:.6g}")
            print(f"adjusted risk: upper={result.upper.adjusted_risk:.6f} lower={result.lower.adjusted_risk:.6f}")
        else:
            print(f"no feasible pair (stage: {result.failed_stage})")
    else:
        if resolved.get("epsilon") is None:
            raise UsageError("--epsilon is required (or --eps-plus/--eps-minus for dual)")
        side = "lower" if mode == "lower" else "upper"
        loss = LossKind.FALSE_NEGATIVE_LOWER if side == "lower" else LossKind.FALSE_POSITIVE_UPPER
        grid = build_grid(dataset, specs, lower_mode if side == "lower" else grid_mode, side)
        try:
            budget = RiskBudget(loss, resolved["epsilon"], resolved["delta"], correction)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        outcome = calibrate(dataset, specs, grid, budget)
        records.append({"type": "calibration", "stage": side, **outcome.to_dict()})
        feasible = outcome.feasible
        if feasible:
            print(f"selected signal={outcome.selected[0]} parameter={outcome.selected[1]:.6g}")
            print(f"adjusted risk: {outcome.adjusted_risk:.6f}")
        else:
            print(f"no feasible pair: {outcome.infeasible_reason}")
    if resolved.get("out"):
        out = Path(resolved["out"])
        out.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in records), encoding="utf-8")
        _write_resolved(out, {"command": "calibrate", **resolved})
    return EXIT_OK if feasible else EXIT_INFEASIBLE


_EFFICIENCY_MODE = {"upper": "upper_only", "lower": "lower_only", "dual": "dual", "budget": "fixed_token_budget"}


def cmd_sweep(args) -> int:
    resolved = _resolve(args, {
        "delta": 0.05, "grid": "uniform:50", "c_count": 32, "splits": 40,
        "validation_size": 50, "epsilons": "0:1:0.01", "mode": "upper",
    })
    if resolved.get("seed") is None:
        raise UsageError("--seed is required for sweep")
    if not resolved.get("out"):
        raise UsageError("--out is required")
    path = _require_input(resolved)
    dataset = ingest(path)
    test_source = None
    if resolved.get("test_in"):
        tpath = Path(resolved["test_in"])
        if not tpath.exists():
            raise FileNotFoundError(f"input file not found: {tpath}")
        test_source = ingest(tpath)
    corrections = resolved.get("correction") or ["naive", "ucb"]
    if isinstance(corrections, str):
        corrections = [corrections]
    eps = resolved["epsilons"]
    eps = parse_epsilons(eps) if isinstance(eps, str) else [float(e) for e in eps]
    workers = resolved.get("workers") or harness.default_workers()
    try:
        spec = harness.SweepSpec(
            epsilons=tuple(eps), splits=int(resolved["splits"]),
            validation_size=int(resolved["validation_size"]), corrections=tuple(corrections),
            seed=int(resolved["seed"]), delta=float(resolved["delta"]),
            grid=GridMode.parse(resolved["grid"]), c_count=int(resolved["c_count"]),
            eps_plus=resolved.get("eps_plus"), workers=int(workers),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    specs = _signals(resolved, dataset)
    mode = resolved["mode"]
    kind = resolved.get("kind") or ("coverage" if mode in ("upper", "lower") else "efficiency")
    side = "lower_fn" if mode == "lower" else "upper_fp"
    if test_source is not None:
        rows = harness.ablation_shift(dataset, test_source, spec, side, specs)
    elif kind == "coverage":
        if mode not in ("upper", "lower"):
            raise UsageError("coverage sweeps take --mode upper or lower")
        rows = harness.coverage_sweep(dataset, spec, side, specs)
    else:
        rows = harness.efficiency_sweep(dataset, spec, _EFFICIENCY_MODE[mode], specs)
    out = Path(resolved["out"])
    harness.write_report(rows, out)
    manifest = {
        "command": "sweep",
        "kind": "ablation" if test_source is not None else kind,
        "mode": mode,
        "spec": spec.to_dict(),
        "signals": [str(s) for s in specs],
        "inputs": {str(path): harness.dataset_digest(dataset)},
        "rows": len(rows),
        "report": out.name,
    }
    if test_source is not None:
        manifest["inputs"][str(resolved["test_in"])] = harness.dataset_digest(test_source)
    manifest["spec"].pop("workers")
    harness.write_manifest(out.with_name(out.name + ".manifest.jsonl"), manifest)
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_report_summary(args) -> int:
    resolved = _resolve(args, {})
    path = _require_input(resolved)
    rows = harness.read_report(path)
    summary = harness.aggregate(rows)
    cols = ["epsilon", "correction", "parameter", "n", "feasible", "test_risk_mean",
            "test_risk_std", "violation_fraction", "accuracy_mean", "tokens_mean"]
    lines = ["\t".join(cols)]
    for rec in summary:
        lines.append("\t".join("" if rec[c] is None else (f"{rec[c]:.6g}" if isinstance(rec[c], float) else str(rec[c])) for c in cols))
    text = "\n".join(lines) + "\n"
    if resolved.get("out"):
        Path(resolved["out"]).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conformal-stop", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, inp=True, out=True):
        sp.add_argument("--config", help="YAML/JSON file of option defaults")
        if inp:
            sp.add_argument("--in", dest="in_", help="trajectory file (.jsonl)")
        if out:
            sp.add_argument("--out")
        return sp

    g = common(sub.add_parser("generate", help="write a synthetic trajectory population"), inp=False)
    g.add_argument("--seed", type=int)
    g.add_argument("--population", type=int)
    g.add_argument("--solvable-fraction", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--tokens-per-step", type=int)
    g.add_argument("--budget-tokens", type=int)
    g.add_argument("--guess-prob", type=float)
    g.add_argument("--signal-name")
    g.add_argument("--id-prefix")
    g.set_defaults(func=cmd_generate)

    c = common(sub.add_parser("ingest-check", help="validate a trajectory file"), out=False)
    c.add_argument("--strictness", choices=["strict", "lenient"])
    c.set_defaults(func=cmd_ingest_check)

    def calib_opts(sp):
        sp.add_argument("--delta", type=float)
        sp.add_argument("--signal", action="append", help="name[:lower][:ema=ALPHA]; repeatable")
        sp.add_argument("--grid", help="uniform:N or quantile:N (upper thresholds)")
        sp.add_argument("--c-count", type=int, help="number of log-spaced c values")
        sp.add_argument("--workers", type=int)

    k = common(sub.add_parser("calibrate", help="select thresholds for a risk tolerance"))
    calib_opts(k)
    k.add_argument("--epsilon", type=float)
    k.add_argument("--eps-plus", type=float)
    k.add_argument("--eps-minus", type=float)
    k.add_argument("--correction", choices=["naive", "ucb", "ucb-union"])
    k.add_argument("--mode", choices=["upper", "lower", "dual"])
    k.set_defaults(func=cmd_calibrate)

    s = common(sub.add_parser("sweep", help="run an epsilon sweep over random splits"))
    calib_opts(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--epsilons", help="start:stop:step or comma list")
    s.add_argument("--splits", type=int)
    s.add_argument("--validation-size", type=int)
    s.add_argument("--correction", action="append", choices=["naive", "ucb", "ucb-union"])
    s.add_argument("--mode", choices=["upper", "lower", "dual", "budget"])
    s.add_argument("--kind", choices=["coverage", "efficiency"])
    s.add_argument("--eps-plus", type=float, help="dual: calibrate lambda_plus at this tolerance")
    s.add_argument("--test-in", help="separate test population (shift ablation)")
    s.set_defaults(func=cmd_sweep)

    r = common(sub.add_parser("report-summary", help="aggregate a sweep report"))
    r.set_defaults(func=cmd_report_summary)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    del args.verbose
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"conformal-stop: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IngestError, CalibrationError, ValueError, KeyError) as exc:
        print(f"conformal-stop: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
