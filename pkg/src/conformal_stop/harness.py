"""Experiment protocols: epsilon sweeps over repeated validation/test splits.

Each sweep returns flat `SweepRow` records; aggregation (means, bands,
violation rates) is done afterwards from the rows. Candidate losses are
computed once per population and every split only averages row subsets, so a
few hundred splits over a ten-thousand-trajectory pool stay cheap.

Candidate grids are built from the whole population's signal values (no
labels are read), which keeps the grid fixed across splits.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np

from .calibrate import (
    DEFAULT_DELTA,
    CandidateGrid,
    CandidateTable,
    Correction,
    GridMode,
    RiskBudget,
    build_grid,
    evaluate_candidates,
    min_risk_upper,
    normalise_correction,
    select_from_table,
)
from .losses import LossKind, column_means
from .policy import BUDGET, LOWER, TRIGGER_NAMES, UPPER
from .signals import SignalSpec, default_spec
from .trajectory import Dataset, dumps, split_indices

SweepSide = Literal["upper_fp", "lower_fn"]
EfficiencyMode = Literal["upper_only", "lower_only", "dual", "fixed_token_budget"]


def default_epsilons() -> list[float]:
    return [round(k * 0.01, 2) for k in range(101)]


@dataclass(frozen=True)
class SweepSpec:
    epsilons: tuple[float, ...] = field(default_factory=lambda: tuple(default_epsilons()))
    splits: int = 40
    validation_size: int = 50
    corrections: tuple[Correction, ...] = ("naive", "ucb")
    seed: int = 0
    delta: float = DEFAULT_DELTA
    grid: GridMode = GridMode()
    c_count: int = 32
    stratify: bool = False
    eps_plus: float | None = None  # dual mode: None fixes lambda_plus at min validation risk
    workers: int = 1

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if list(eps) != sorted(eps) or any(not 0.0 <= e <= 1.0 for e in eps):
            raise ValueError("epsilons must be sorted ascending within [0, 1]")
        object.__setattr__(self, "epsilons", eps)
        object.__setattr__(
            self, "corrections", tuple(normalise_correction(c) for c in self.corrections)
        )
        if isinstance(self.grid, str):
            object.__setattr__(self, "grid", GridMode.parse(self.grid))
        if self.splits <= 0 or self.validation_size <= 0:
            raise ValueError("splits and validation_size must be positive")

    def split_seeds(self) -> list[int]:
        ss = np.random.SeedSequence(self.seed)
        return [int(s) for s in ss.generate_state(self.splits, dtype=np.uint32)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = str(self.grid)
        d["epsilons"] = list(self.epsilons)
        d["corrections"] = list(self.corrections)
        return d


@dataclass
class SweepRow:
    epsilon: float | None
    correction: str | None
    split_seed: int
    signal_selected: str | None
    parameter: float | str | None
    validation_risk: float | None
    test_risk: float
    test_efficiency: float
    total_tokens: int
    accuracy: float
    abstention_fraction: float
    trigger_counts: dict
    accuracy_unabstained: float | None = None


ROW_FIELDS = [f.name for f in fields(SweepRow)]


# -- metrics on a test subset -------------------------------------------------


def _test_metrics(table: CandidateTable, j: int | None, idx: np.ndarray, tokens: np.ndarray,
                  correct: np.ndarray, lengths: np.ndarray, solvable: np.ndarray):
    """Metrics of candidate column j (None = run every trajectory to its budget)."""
    if j is None:
        step = lengths[idx]
        trig = np.full(idx.size, BUDGET, dtype=np.int8)
        risk = 0.0
        eff = None
    else:
        step = table.step[idx, j]
        trig = table.trigger[idx, j]
        risk = math.fsum(table.risk[idx, j].tolist()) / idx.size
        eff = math.fsum(table.efficiency[idx, j].tolist()) / idx.size
    used = tokens[idx, step - 1]
    right = correct[idx, step - 1]
    answered = trig != LOWER
    acc = float(np.sum(right & answered)) / idx.size
    n_answered = int(answered.sum())
    acc_un = float(np.sum(right & answered)) / n_answered if n_answered else None
    counts = {}
    for label, mask in (("solvable", solvable[idx]), ("unsolvable", ~solvable[idx])):
        counts[label] = {TRIGGER_NAMES[c]: int(np.sum(mask & (trig == c))) for c in (UPPER, LOWER, BUDGET)}
    return risk, eff, int(used.sum()), acc, float(np.mean(~answered)), counts, acc_un


def _budget_efficiency(kind: LossKind, arrays, idx) -> float:
    # efficiency loss of running to the last step
    correct = arrays.correct[idx]
    T = arrays.lengths[idx]
    if kind is LossKind.EFFICIENCY_UPPER:
        solv = correct.any(axis=1)
        first = correct.argmax(axis=1) + 1
        vals = np.where(solv, np.maximum(0, T - first) / T, 0.0)
    else:
        tpos = np.arange(correct.shape[1])[None, :] < T[:, None]
        vals = ((~correct) & tpos).sum(axis=1) / T
    return math.fsum(vals.tolist()) / len(idx)


@dataclass
class _Context:
    """Precomputed per-population state shared by all splits."""

    table: CandidateTable
    dataset: Dataset
    efficiency: LossKind

    def __post_init__(self):
        a = self.dataset.arrays
        self.tokens, self.correct, self.lengths = a.tokens, a.correct, a.lengths
        self.solvable = a.solvable

    def row(self, j, test_idx, epsilon, correction, seed, val_risk, parameter=None) -> SweepRow:
        risk, eff, tokens, acc, abst, counts, acc_un = _test_metrics(
            self.table, j, test_idx, self.tokens, self.correct, self.lengths, self.solvable
        )
        if eff is None:
            eff = _budget_efficiency(self.efficiency, self.dataset.arrays, test_idx)
        if j is None:
            name = param = None
        else:
            name = self.table.signals[j]
            param = float(self.table.params[j]) if parameter is None else parameter
        return SweepRow(epsilon, correction, seed, name, param, val_risk, risk, eff, tokens,
                        acc, abst, counts, acc_un)


def _side_losses(side: SweepSide) -> tuple[LossKind, LossKind, str]:
    if side == "upper_fp":
        return LossKind.FALSE_POSITIVE_UPPER, LossKind.EFFICIENCY_UPPER, "upper"
    if side == "lower_fn":
        return LossKind.FALSE_NEGATIVE_LOWER, LossKind.EFFICIENCY_LOWER, "lower"
    raise ValueError(f"unknown side {side!r}")


def _specs(dataset: Dataset, signals: Sequence[SignalSpec] | None) -> list[SignalSpec]:
    if signals:
        return list(signals)
    return [default_spec(n) for n in dataset.signal_catalog]


def _grid(dataset, specs, spec: SweepSpec, grid_side) -> CandidateGrid:
    mode = GridMode(spec.grid.kind, spec.c_count) if grid_side == "lower" else spec.grid
    return build_grid(dataset, specs, mode, grid_side)


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _calibrated_rows(val_ctx: _Context, test_ctx: _Context, val_idx, test_idx,
                     spec: SweepSpec, loss: LossKind, seed: int) -> list[SweepRow]:
    vt = val_ctx.table.rows(val_idx)
    risk_means = column_means(vt.risk)
    eff_means = column_means(vt.efficiency)
    rows = []
    for correction in spec.corrections:
        for eps in spec.epsilons:
            out = select_from_table(vt, RiskBudget(loss, eps, spec.delta, correction),
                                    risk_means, eff_means)
            j = None
            val_risk = None
            if out.selected is not None:
                j = _column(vt, out.selected)
                val_risk = float(risk_means[j])
            rows.append(test_ctx.row(j, test_idx, eps, correction, seed, val_risk))
    return rows


def _column(table: CandidateTable, selected: tuple[str, float]) -> int:
    name, p = selected
    for j, (s, v) in enumerate(zip(table.signals, table.params)):
        if s == name and v == p:
            return j
    raise KeyError(selected)


# -- public sweeps ------------------------------------------------------------


def coverage_sweep(dataset: Dataset, spec: SweepSpec, side: SweepSide = "upper_fp",
                   signals: Sequence[SignalSpec] | None = None) -> list[SweepRow]:
    """Calibrate on each random validation split, record realised test risk."""
    if spec.validation_size >= len(dataset):
        raise ValueError("dataset too small for the requested validation size")
    loss, eff, grid_side = _side_losses(side)
    specs = _specs(dataset, signals)
    grid = _grid(dataset, specs, spec, grid_side)
    ctx = _Context(evaluate_candidates(dataset, specs, grid, loss, eff), dataset, eff)
    strata = dataset.arrays.solvable if spec.stratify else None

    def one(seed):
        val, test = split_indices(len(dataset), spec.validation_size, seed, strata)
        return _calibrated_rows(ctx, ctx, val, test, spec, loss, seed)

    return _ordered(_map(one, spec.split_seeds(), spec.workers))


def _ordered(per_split: list[list[SweepRow]]) -> list[SweepRow]:
    # deterministic (correction, epsilon, split) ordering
    rows = [r for block in per_split for r in block]
    seeds = {}
    for r in rows:
        seeds.setdefault(r.split_seed, len(seeds))
    corr_rank = {}
    for r in rows:
        corr_rank.setdefault(r.correction, len(corr_rank))
    return sorted(
        rows,
        key=lambda r: (
            -1.0 if r.epsilon is None else r.epsilon,
            corr_rank[r.correction],
            seeds[r.split_seed],
        ),
    )


def efficiency_sweep(dataset: Dataset, spec: SweepSpec, mode: EfficiencyMode = "upper_only",
                     signals: Sequence[SignalSpec] | None = None) -> list[SweepRow]:
    """Accuracy (abstentions count as wrong) versus tokens, one row per cell."""
    if spec.validation_size >= len(dataset):
        raise ValueError("dataset too small for the requested validation size")
    specs = _specs(dataset, signals)
    strata = dataset.arrays.solvable if spec.stratify else None
    seeds = spec.split_seeds()

    if mode == "fixed_token_budget":
        return _token_budget_rows(dataset, spec, seeds, strata)
    if mode in ("upper_only", "lower_only"):
        side = "upper_fp" if mode == "upper_only" else "lower_fn"
        loss, eff, grid_side = _side_losses(side)
        grid = _grid(dataset, specs, spec, grid_side)
        ctx = _Context(evaluate_candidates(dataset, specs, grid, loss, eff), dataset, eff)

        def one(seed):
            val, test = split_indices(len(dataset), spec.validation_size, seed, strata)
            return _calibrated_rows(ctx, ctx, val, test, spec, loss, seed)

        return _ordered(_map(one, seeds, spec.workers))
    if mode == "dual":
        return _dual_rows(dataset, spec, specs, seeds, strata)
    raise ValueError(f"unknown efficiency mode {mode!r}")


def _dual_rows(dataset, spec: SweepSpec, specs, seeds, strata) -> list[SweepRow]:
    if len(specs) != 1:
        raise ValueError("dual mode monitors exactly one signal")
    upper_grid = _grid(dataset, specs, spec, "upper")
    lower_grid = _grid(dataset, specs, spec, "lower")
    up_ctx = _Context(
        evaluate_candidates(dataset, specs, upper_grid, LossKind.FALSE_POSITIVE_UPPER,
                            LossKind.EFFICIENCY_UPPER),
        dataset, LossKind.EFFICIENCY_UPPER,
    )
    lower_tables: dict[float, _Context] = {}

    def lower_ctx(lam: float) -> _Context:
        if lam not in lower_tables:
            lower_tables[lam] = _Context(
                evaluate_candidates(dataset, specs, lower_grid, LossKind.FALSE_NEGATIVE_LOWER,
                                    LossKind.EFFICIENCY_LOWER, fixed_upper=lam),
                dataset, LossKind.EFFICIENCY_LOWER,
            )
        return lower_tables[lam]

    rows = []
    for seed in seeds:
        val, test = split_indices(len(dataset), spec.validation_size, seed, strata)
        vt = up_ctx.table.rows(val)
        for correction in spec.corrections:
            if spec.eps_plus is None:
                ju = min_risk_upper(vt)
            else:
                out = select_from_table(
                    vt, RiskBudget(LossKind.FALSE_POSITIVE_UPPER, spec.eps_plus, spec.delta, correction)
                )
                ju = None if out.selected is None else _column(vt, out.selected)
            if ju is None:
                for eps in spec.epsilons:
                    rows.append(up_ctx.row(None, test, eps, correction, seed, None))
                continue
            lam = float(vt.params[ju])
            ctx = lower_ctx(lam)
            lt = ctx.table.rows(val)
            risk_means = column_means(lt.risk)
            eff_means = column_means(lt.efficiency)
            for eps in spec.epsilons:
                out = select_from_table(
                    lt, RiskBudget(LossKind.FALSE_NEGATIVE_LOWER, eps, spec.delta, correction),
                    risk_means, eff_means,
                )
                if out.selected is None:
                    rows.append(up_ctx.row(None, test, eps, correction, seed, None))
                    continue
                j = _column(lt, out.selected)
                param = json.dumps([lam, float(lt.params[j])])
                rows.append(ctx.row(j, test, eps, correction, seed, float(risk_means[j]), param))
    return _ordered([rows])


def _token_budget_rows(dataset: Dataset, spec: SweepSpec, seeds, strata) -> list[SweepRow]:
    a = dataset.arrays
    tmax = int(a.lengths.max())
    rows = []
    for seed in seeds:
        _, test = split_indices(len(dataset), spec.validation_size, seed, strata)
        for k in range(1, tmax + 1):
            step = np.minimum(k, a.lengths[test])
            right = a.correct[test, step - 1]
            used = a.tokens[test, step - 1]
            counts = {
                label: {"upper": 0, "lower": 0, "budget": int(mask.sum())}
                for label, mask in (("solvable", a.solvable[test]), ("unsolvable", ~a.solvable[test]))
            }
            first = a.correct[test].argmax(axis=1) + 1
            eff = np.where(a.solvable[test], np.maximum(0, step - first) / a.lengths[test], 0.0)
            acc = float(right.mean())
            rows.append(SweepRow(None, None, seed, "step_cutoff", float(k), None, 0.0,
                                 math.fsum(eff.tolist()) / test.size, int(used.sum()),
                                 acc, 0.0, counts, acc))
    return rows


def ablation_shift(validation_source: Dataset, test_source: Dataset, spec: SweepSpec,
                   side: SweepSide = "upper_fp",
                   signals: Sequence[SignalSpec] | None = None) -> list[SweepRow]:
    """Calibrate on draws from one population, evaluate on another.

    When both arguments are the same object the drawn validation ids are held
    out of the test side, which reduces to `coverage_sweep`.
    """
    if tuple(validation_source.signal_catalog) != tuple(test_source.signal_catalog):
        raise ValueError(
            f"signal catalogs differ: {validation_source.signal_catalog} vs "
            f"{test_source.signal_catalog}"
        )
    if spec.validation_size >= len(validation_source):
        raise ValueError("validation source too small for the requested validation size")
    same = validation_source is test_source
    loss, eff, grid_side = _side_losses(side)
    specs = _specs(validation_source, signals)
    grid = _grid(validation_source, specs, spec, grid_side)
    val_ctx = _Context(evaluate_candidates(validation_source, specs, grid, loss, eff),
                       validation_source, eff)
    test_ctx = val_ctx if same else _Context(
        evaluate_candidates(test_source, specs, grid, loss, eff), test_source, eff
    )
    strata = validation_source.arrays.solvable if spec.stratify else None
    all_test = np.arange(len(test_source))

    def one(seed):
        val, rest = split_indices(len(validation_source), spec.validation_size, seed, strata)
        return _calibrated_rows(val_ctx, test_ctx, val, rest if same else all_test, spec, loss, seed)

    return _ordered(_map(one, spec.split_seeds(), spec.workers))


def validation_size_ablation(dataset: Dataset, spec: SweepSpec, sizes: Iterable[int] = (8, 16, 40),
                             side: SweepSide = "upper_fp",
                             signals: Sequence[SignalSpec] | None = None) -> dict[int, list[SweepRow]]:
    from dataclasses import replace

    return {n: coverage_sweep(dataset, replace(spec, validation_size=n), side, signals) for n in sizes}


# -- report layer -------------------------------------------------------------


def violation_fraction(rows: Iterable[SweepRow], correction: str | None = None,
                       risk: dict | None = None) -> float:
    """Share of calibrated cells whose realised risk exceeds epsilon.

    Cells without a feasible candidate never violate. ``risk`` optionally maps
    (signal, parameter) to a reference risk used instead of the test risk.
    """
    hits = total = 0
    for r in rows:
        if correction is not None and r.correction != normalise_correction(correction):
            continue
        total += 1
        if r.signal_selected is None:
            continue
        realised = r.test_risk if risk is None else risk[(r.signal_selected, r.parameter)]
        hits += realised > r.epsilon
    return hits / total if total else float("nan")


def paired_violations(rows: Iterable[SweepRow], correction: str) -> dict[int, float]:
    """Per-split violation fraction, keyed by split seed."""
    by_seed: dict[int, list[SweepRow]] = {}
    for r in rows:
        if r.correction == normalise_correction(correction):
            by_seed.setdefault(r.split_seed, []).append(r)
    return {s: violation_fraction(rs) for s, rs in by_seed.items()}


def aggregate(rows: Iterable[SweepRow]) -> list[dict]:
    """Mean / stdev of test risk, accuracy and tokens per (epsilon, correction)."""
    groups: dict[tuple, list[SweepRow]] = {}
    for r in rows:
        groups.setdefault((r.epsilon, r.correction, r.parameter if r.epsilon is None else None), []).append(r)
    out = []
    for (eps, corr, param), rs in groups.items():
        risk = np.array([r.test_risk for r in rs])
        acc = np.array([r.accuracy for r in rs])
        tok = np.array([r.total_tokens for r in rs], dtype=float)
        out.append({
            "epsilon": eps,
            "correction": corr,
            "parameter": param,
            "n": len(rs),
            "feasible": sum(r.signal_selected is not None for r in rs),
            "test_risk_mean": float(risk.mean()),
            "test_risk_std": float(risk.std()),
            "violation_fraction": violation_fraction(rs) if eps is not None else None,
            "accuracy_mean": float(acc.mean()),
            "tokens_mean": float(tok.mean()),
        })
    return out


def operating_point(points: Sequence[dict], rank: int = 2) -> dict:
    """Point with the ``rank``-th highest accuracy; fewest tokens among ties.

    Falls back to the best available rank when there are fewer distinct
    accuracy levels.
    """
    levels = sorted({p["accuracy_mean"] for p in points}, reverse=True)
    level = levels[min(rank, len(levels)) - 1]
    tied = [p for p in points if p["accuracy_mean"] == level]
    return min(tied, key=lambda p: p["tokens_mean"])


def rows_to_csv(rows: Iterable[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ROW_FIELDS)
    for r in rows:
        vals = []
        for name in ROW_FIELDS:
            v = getattr(r, name)
            if v is None:
                vals.append("")
            elif isinstance(v, dict):
                vals.append(json.dumps(v, sort_keys=True, separators=(",", ":")))
            elif isinstance(v, float):
                vals.append(repr(v))
            else:
                vals.append(v)
        w.writerow(vals)
    return buf.getvalue()


def write_report(rows: Sequence[SweepRow], path: str | Path) -> None:
    Path(path).write_text(rows_to_csv(rows), encoding="utf-8")


def _parse_cell(name: str, text: str):
    if text == "":
        return None
    if name in ("correction", "signal_selected"):
        return text
    if name == "trigger_counts":
        return json.loads(text)
    if name in ("split_seed", "total_tokens"):
        return int(text)
    if name == "parameter":
        try:
            return float(text)
        except ValueError:
            return text
    return float(text)


def read_report(path: str | Path) -> list[SweepRow]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [SweepRow(**{k: _parse_cell(k, v) for k, v in rec.items()}) for rec in reader]


def dataset_digest(dataset: Dataset) -> str:
    return hashlib.sha256(dumps(dataset).encode("utf-8")).hexdigest()


def write_manifest(path: str | Path, record: dict) -> None:
    Path(path).write_text(json.dumps(record, sort_keys=True) + "\n", encoding="utf-8")


def default_workers() -> int:
    env = os.environ.get("CONFORMAL_STOP_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
