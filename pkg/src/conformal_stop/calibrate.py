"""Turn a risk tolerance into a stopping threshold using a validation set.

Every (signal, parameter) candidate is scored by its adjusted validation risk
(empirical risk plus an optional Hoeffding margin). Candidates at or below the
tolerance are feasible; among those the one with the smallest validation
efficiency loss wins. Ties break on lower adjusted risk, then on the more
conservative parameter (larger lambda_plus, smaller c), then on signal name.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .losses import LossKind, column_means, loss_matrix
from .policy import (
    DualPolicy,
    LowerPolicy,
    StoppingPolicy,
    UpperPolicy,
    combine_exits,
    lower_exit_matrix,
    upper_exit_matrix,
)
from .signals import SignalSpec, dataset_series
from .trajectory import Dataset

Correction = Literal["naive", "ucb", "ucb_union"]
Side = Literal["upper", "lower"]

DEFAULT_DELTA = 0.05
DEFAULT_RESOLUTION = 50
DEFAULT_C_COUNT = 32
C_SPAN = (1e-5, 1e0)

EFFICIENCY_FOR = {
    LossKind.FALSE_POSITIVE_UPPER: LossKind.EFFICIENCY_UPPER,
    LossKind.FALSE_NEGATIVE_LOWER: LossKind.EFFICIENCY_LOWER,
}


class CalibrationError(ValueError):
    pass


def normalise_correction(name: str) -> Correction:
    name = name.replace("-", "_")
    if name not in ("naive", "ucb", "ucb_union"):
        raise ValueError(f"unknown correction {name!r}")
    return name  # type: ignore[return-value]


@dataclass(frozen=True)
class RiskBudget:
    loss: LossKind
    epsilon: float
    delta: float = DEFAULT_DELTA
    correction: Correction = "ucb"

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        object.__setattr__(self, "correction", normalise_correction(self.correction))
        if not self.loss.is_correctness:
            raise ValueError("a risk budget must target a correctness loss")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")

    @property
    def side(self) -> Side:
        return "upper" if self.loss is LossKind.FALSE_POSITIVE_UPPER else "lower"


def hoeffding_correction(n: int, delta: float, grid_size: int = 1) -> float:
    if n <= 0:
        raise ValueError("validation size must be positive")
    return math.sqrt(math.log(grid_size / delta) / (2 * n))


def correction_term(correction: Correction, n: int, delta: float, grid_size: int) -> float:
    if n <= 0:
        raise ValueError("validation size must be positive")
    if correction == "naive":
        return 0.0
    if correction == "ucb":
        return hoeffding_correction(n, delta)
    return hoeffding_correction(n, delta, grid_size)


def adjusted_risk(
    validation: Dataset,
    policy: StoppingPolicy,
    budget: RiskBudget,
    grid_size: int = 1,
    pipeline: SignalSpec | None = None,
) -> float:
    from .losses import empirical_risk

    n = len(validation)
    if n == 0:
        raise ValueError("validation set is empty")
    emp = empirical_risk(validation, policy, budget.loss, pipeline)
    return emp + correction_term(budget.correction, n, budget.delta, grid_size)


# -- candidate grids ----------------------------------------------------------


@dataclass(frozen=True)
class GridMode:
    kind: Literal["uniform", "quantile"] = "uniform"
    size: int = DEFAULT_RESOLUTION

    def __post_init__(self):
        if self.kind not in ("uniform", "quantile"):
            raise ValueError(f"unknown grid mode {self.kind!r}")
        if self.size < 2:
            raise ValueError("grid resolution must be at least 2")

    @classmethod
    def parse(cls, text: str) -> "GridMode":
        kind, _, size = text.partition(":")
        return cls(kind, int(size) if size else DEFAULT_RESOLUTION)

    def __str__(self):
        return f"{self.kind}:{self.size}"


@dataclass(frozen=True)
class CandidateGrid:
    per_signal: dict[str, tuple[float, ...]]
    side: Side = "upper"
    mode: GridMode = GridMode()

    def __post_init__(self):
        clean = {}
        for name, values in self.per_signal.items():
            arr = np.unique(np.asarray(values, dtype=float))
            clean[name] = tuple(float(v) for v in arr)
        object.__setattr__(self, "per_signal", clean)

    @property
    def size(self) -> int:
        return sum(len(v) for v in self.per_signal.values())

    def restrict(self, name: str) -> "CandidateGrid":
        return CandidateGrid({name: self.per_signal[name]}, self.side, self.mode)


def c_grid(count: int = DEFAULT_C_COUNT, span: tuple[float, float] = C_SPAN) -> np.ndarray:
    return np.logspace(math.log10(span[0]), math.log10(span[1]), count)


def build_grid(
    validation: Dataset,
    signals: Sequence[SignalSpec],
    mode: GridMode = GridMode(),
    side: Side = "upper",
    c_span: tuple[float, float] = C_SPAN,
) -> CandidateGrid:
    """Candidate parameters per signal.

    Upper grids come from the oriented, smoothed signal values seen on the
    validation set. Lower grids are a log-spaced span of sigmoid sharpness c
    in per-token units, identical for every signal.
    """
    if len(validation) == 0:
        raise ValueError("cannot build a grid from an empty dataset")
    per_signal = {}
    for spec in signals:
        if side == "lower":
            per_signal[spec.name] = c_grid(mode.size, c_span)
            continue
        values = dataset_series(validation, spec)
        values = values[~np.isnan(values)]
        if mode.kind == "uniform":
            per_signal[spec.name] = np.linspace(values.min(), values.max(), mode.size)
        else:
            probs = np.arange(1, mode.size + 1) / mode.size
            per_signal[spec.name] = np.quantile(values, probs)
    return CandidateGrid(per_signal, side, mode)


# -- candidate evaluation -----------------------------------------------------


@dataclass
class CandidateTable:
    """Per-trajectory losses for every grid candidate on one dataset.

    Columns are ordered signal by signal, parameters ascending within a signal.
    """

    signals: list[str]
    params: np.ndarray
    risk: np.ndarray  # (n, G) correctness loss
    efficiency: np.ndarray  # (n, G)
    step: np.ndarray  # (n, G)
    trigger: np.ndarray  # (n, G) int8 codes
    side: Side
    fixed_upper: float | None = None

    @property
    def size(self) -> int:
        return self.params.size

    def rows(self, idx) -> "CandidateTable":
        return CandidateTable(
            self.signals,
            self.params,
            self.risk[idx],
            self.efficiency[idx],
            self.step[idx],
            self.trigger[idx],
            self.side,
            self.fixed_upper,
        )

    def policy(self, j: int, budget_tokens_override: int | None = None) -> StoppingPolicy:
        name, p = self.signals[j], float(self.params[j])
        if self.side == "upper":
            return UpperPolicy(name, p)
        if self.fixed_upper is not None:
            return DualPolicy.build(name, self.fixed_upper, p, budget_tokens_override)
        return LowerPolicy(name, p, budget_tokens_override)


def evaluate_candidates(
    dataset: Dataset,
    signals: Sequence[SignalSpec],
    grid: CandidateGrid,
    loss: LossKind,
    efficiency: LossKind,
    fixed_upper: float | None = None,
) -> CandidateTable:
    """Exit and loss matrices for all candidates of ``grid`` on ``dataset``.

    With ``fixed_upper`` set on a lower grid, each candidate is the dual
    policy (lambda_plus fixed, lower curve capped by it).
    """
    a = dataset.arrays
    names: list[str] = []
    params, steps, trigs = [], [], []
    by_name = {s.name: s for s in signals}
    for name, values in grid.per_signal.items():
        if name not in by_name:
            raise CalibrationError(f"grid signal {name!r} has no SignalSpec")
        S = dataset_series(dataset, by_name[name])
        vals = np.asarray(values, dtype=float)
        if grid.side == "upper":
            up, lo = upper_exit_matrix(S, vals), None
        else:
            lo = lower_exit_matrix(S, a.tokens, a.budgets, vals, fixed_upper)
            up = None
            if fixed_upper is not None:
                up = np.repeat(upper_exit_matrix(S, np.array([fixed_upper])), vals.size, axis=1)
        step, trig = combine_exits(up, lo, a.lengths)
        names += [name] * vals.size
        params.append(vals)
        steps.append(step)
        trigs.append(trig)
    if not names:
        raise CalibrationError("empty candidate grid")
    step = np.concatenate(steps, axis=1)
    trig = np.concatenate(trigs, axis=1)
    return CandidateTable(
        names,
        np.concatenate(params),
        loss_matrix(loss, a, step, trig),
        loss_matrix(efficiency, a, step, trig),
        step,
        trig,
        grid.side,
        fixed_upper,
    )


# -- selection ----------------------------------------------------------------


@dataclass(frozen=True)
class AuditRow:
    signal: str
    parameter: float
    adjusted_risk: float
    efficiency: float


@dataclass
class CalibrationOutcome:
    selected: tuple[str, float] | None
    adjusted_risk: float | None
    efficiency_estimate: float | None
    feasible_set: list[AuditRow] = field(default_factory=list)
    infeasible_reason: str | None = None
    side: Side = "upper"
    epsilon: float | None = None
    correction: str | None = None
    n_candidates: int = 0
    fixed_upper: float | None = None

    @property
    def feasible(self) -> bool:
        return self.selected is not None

    def policy(self) -> StoppingPolicy | None:
        if self.selected is None:
            return None
        name, p = self.selected
        if self.side == "upper":
            return UpperPolicy(name, p)
        if self.fixed_upper is not None:
            return DualPolicy.build(name, self.fixed_upper, p)
        return LowerPolicy(name, p)

    def to_dict(self) -> dict:
        return {
            "side": self.side,
            "epsilon": self.epsilon,
            "correction": self.correction,
            "fixed_upper": self.fixed_upper,
            "selected": None
            if self.selected is None
            else {"signal": self.selected[0], "parameter": self.selected[1]},
            "adjusted_risk": self.adjusted_risk,
            "efficiency_estimate": self.efficiency_estimate,
            "n_candidates": self.n_candidates,
            "infeasible_reason": self.infeasible_reason,
            "feasible_set": [
                {
                    "signal": r.signal,
                    "parameter": r.parameter,
                    "adjusted_risk": r.adjusted_risk,
                    "efficiency": r.efficiency,
                }
                for r in self.feasible_set
            ],
        }


def select_index(
    signals: Sequence[str],
    params: np.ndarray,
    adjusted: np.ndarray,
    efficiency: np.ndarray,
    epsilon: float,
    side: Side,
) -> int | None:
    feasible = np.flatnonzero(adjusted <= epsilon)
    if feasible.size == 0:
        return None
    conservative = -params[feasible] if side == "upper" else params[feasible]
    names = np.array([signals[j] for j in feasible])
    # lexsort: last key is primary
    order = np.lexsort((names, conservative, adjusted[feasible], efficiency[feasible]))
    return int(feasible[order[0]])


def select_from_table(
    table: CandidateTable,
    budget: RiskBudget,
    risk_means: np.ndarray | None = None,
    eff_means: np.ndarray | None = None,
) -> CalibrationOutcome:
    n = table.risk.shape[0]
    if n == 0:
        raise ValueError("validation set is empty")
    if table.size == 0:
        raise CalibrationError("empty candidate grid")
    if risk_means is None:
        risk_means = column_means(table.risk)
    if eff_means is None:
        eff_means = column_means(table.efficiency)
    adj = risk_means + correction_term(budget.correction, n, budget.delta, table.size)
    j = select_index(table.signals, table.params, adj, eff_means, budget.epsilon, table.side)
    feasible = np.flatnonzero(adj <= budget.epsilon)
    audit = [
        AuditRow(table.signals[k], float(table.params[k]), float(adj[k]), float(eff_means[k]))
        for k in feasible
    ]
    common = dict(
        side=table.side,
        epsilon=budget.epsilon,
        correction=budget.correction,
        n_candidates=table.size,
        fixed_upper=table.fixed_upper,
    )
    if j is None:
        return CalibrationOutcome(
            None,
            None,
            None,
            [],
            f"no candidate has adjusted risk <= {budget.epsilon:g} "
            f"(best {float(adj.min()):.6g})",
            **common,
        )
    return CalibrationOutcome(
        (table.signals[j], float(table.params[j])),
        float(adj[j]),
        float(eff_means[j]),
        audit,
        None,
        **common,
    )


def _check_pairing(budget: RiskBudget, efficiency: LossKind, side: Side):
    efficiency = LossKind(efficiency)
    if EFFICIENCY_FOR[budget.loss] is not efficiency:
        raise CalibrationError(
            f"efficiency loss {efficiency.value} does not pair with {budget.loss.value}"
        )
    if side != budget.side:
        raise CalibrationError(f"{side} grid cannot calibrate {budget.loss.value}")


def calibrate(
    validation: Dataset,
    signals: Sequence[SignalSpec],
    grid: CandidateGrid,
    budget: RiskBudget,
    efficiency: LossKind | None = None,
    fixed_upper: float | None = None,
) -> CalibrationOutcome:
    """Select the most efficient feasible (signal, parameter) pair."""
    efficiency = EFFICIENCY_FOR[budget.loss] if efficiency is None else LossKind(efficiency)
    _check_pairing(budget, efficiency, grid.side)
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    if grid.size == 0:
        raise CalibrationError("empty candidate grid")
    table = evaluate_candidates(validation, signals, grid, budget.loss, efficiency, fixed_upper)
    return select_from_table(table, budget)


@dataclass
class DualCalibration:
    upper: CalibrationOutcome
    lower: CalibrationOutcome | None
    failed_stage: Side | None

    @property
    def policy(self) -> DualPolicy | None:
        if self.failed_stage is not None:
            return None
        return DualPolicy.build(self.upper.selected[0], self.upper.selected[1], self.lower.selected[1])

    def to_dict(self) -> dict:
        return {
            "failed_stage": self.failed_stage,
            "stages": [s.to_dict() for s in (self.upper, self.lower) if s is not None],
        }


def calibrate_dual(
    validation: Dataset,
    signal: SignalSpec,
    grids: tuple[CandidateGrid, CandidateGrid],
    eps_plus: float,
    eps_minus: float,
    delta: float = DEFAULT_DELTA,
    correction: Correction = "ucb",
) -> DualCalibration:
    """Two-step calibration: lambda_plus first, then c under the full dual policy."""
    upper_grid, lower_grid = grids
    if upper_grid.size == 0 or lower_grid.size == 0:
        raise CalibrationError("both grids must be non-empty")
    upper_grid = upper_grid.restrict(signal.name)
    lower_grid = lower_grid.restrict(signal.name)
    up = calibrate(
        validation,
        [signal],
        upper_grid,
        RiskBudget(LossKind.FALSE_POSITIVE_UPPER, eps_plus, delta, correction),
    )
    if not up.feasible:
        return DualCalibration(up, None, "upper")
    lo = calibrate(
        validation,
        [signal],
        lower_grid,
        RiskBudget(LossKind.FALSE_NEGATIVE_LOWER, eps_minus, delta, correction),
        fixed_upper=up.selected[1],
    )
    return DualCalibration(up, lo, None if lo.feasible else "lower")


def min_risk_upper(table: CandidateTable) -> int:
    """Index of the upper candidate with smallest validation risk.

    Used by the fixed-upper dual protocol; ties fall through the usual
    efficiency / conservativeness / name order.
    """
    risk = column_means(table.risk)
    eff = column_means(table.efficiency)
    j = select_index(table.signals, table.params, risk, eff, float(risk.min()), table.side)
    assert j is not None
    return j
