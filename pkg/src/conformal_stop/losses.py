"""Correctness and efficiency losses at a policy-induced exit, and their risks.

All four losses lie in [0, 1]. Correctness losses are charged only when the
matching threshold fired; a budget exit costs nothing on either. Efficiency
losses are normalised by the step count T.
"""

from __future__ import annotations

import math
from enum import Enum

import numpy as np

from .policy import (
    LOWER,
    UPPER,
    DualPolicy,
    ExitOutcome,
    LowerPolicy,
    StoppingPolicy,
    UpperPolicy,
    combine_exits,
    lower_exit_matrix,
    upper_exit_matrix,
)
from .signals import SignalSpec, dataset_series, default_spec, has_signal
from .trajectory import Dataset, PaddedArrays, Trajectory


class LossKind(str, Enum):
    FALSE_POSITIVE_UPPER = "false_positive_upper"
    FALSE_NEGATIVE_LOWER = "false_negative_lower"
    EFFICIENCY_UPPER = "efficiency_upper"
    EFFICIENCY_LOWER = "efficiency_lower"

    @property
    def is_correctness(self) -> bool:
        return self in (LossKind.FALSE_POSITIVE_UPPER, LossKind.FALSE_NEGATIVE_LOWER)


def fp_loss(traj: Trajectory, outcome: ExitOutcome) -> float:
    return float(outcome.trigger == "upper" and not outcome.correct_at_exit)


def fn_loss(traj: Trajectory, outcome: ExitOutcome) -> float:
    if outcome.trigger != "lower":
        return 0.0
    tau = outcome.exit_step
    future = traj.steps[tau - 1 :]
    return sum(s.correct for s in future) / (traj.T - tau + 1)


def eff_upper_loss(traj: Trajectory, outcome: ExitOutcome) -> float:
    first = traj.first_correct
    if first is None:
        return 0.0
    return max(0, outcome.exit_step - first) / traj.T


def eff_lower_loss(traj: Trajectory, outcome: ExitOutcome) -> float:
    wrong = sum(not s.correct for s in traj.steps[: outcome.exit_step])
    return wrong / traj.T


LOSS_FUNCTIONS = {
    LossKind.FALSE_POSITIVE_UPPER: fp_loss,
    LossKind.FALSE_NEGATIVE_LOWER: fn_loss,
    LossKind.EFFICIENCY_UPPER: eff_upper_loss,
    LossKind.EFFICIENCY_LOWER: eff_lower_loss,
}


def instance_loss(kind: LossKind, traj: Trajectory, outcome: ExitOutcome) -> float:
    return LOSS_FUNCTIONS[LossKind(kind)](traj, outcome)


def exact_mean(values) -> float:
    """Correctly rounded mean; independent of summation order."""
    values = list(values)
    if not values:
        raise ValueError("mean of an empty collection")
    return math.fsum(values) / len(values)


def column_means(matrix: np.ndarray) -> np.ndarray:
    """Per-column `exact_mean` of an (n, G) matrix."""
    n = matrix.shape[0]
    if n == 0:
        raise ValueError("mean over zero rows")
    return np.array([math.fsum(col) for col in matrix.T.tolist()]) / n


# -- vectorised losses --------------------------------------------------------


def loss_matrix(kind: LossKind, arrays: PaddedArrays, step: np.ndarray, trigger: np.ndarray) -> np.ndarray:
    """Per-(trajectory, candidate) loss given exit step and trigger matrices.

    Arithmetic mirrors the scalar loss functions so values agree bit-for-bit.
    """
    kind = LossKind(kind)
    n = arrays.lengths.size
    rows = np.arange(n)[:, None]
    col = step - 1
    T = arrays.lengths[:, None]
    correct = arrays.correct
    if kind is LossKind.FALSE_POSITIVE_UPPER:
        wrong_at_exit = ~correct[rows, col]
        return ((trigger == UPPER) & wrong_at_exit).astype(float)
    if kind is LossKind.FALSE_NEGATIVE_LOWER:
        suffix = np.cumsum(correct[:, ::-1], axis=1)[:, ::-1]
        future = suffix[rows, col]
        out = future / (T - step + 1)
        return np.where(trigger == LOWER, out, 0.0)
    if kind is LossKind.EFFICIENCY_UPPER:
        solvable = correct.any(axis=1)
        first = correct.argmax(axis=1) + 1
        out = np.maximum(0, step - first[:, None]) / T
        return np.where(solvable[:, None], out, 0.0)
    padded_wrong = ~correct
    padded_wrong[np.arange(correct.shape[1])[None, :] >= arrays.lengths[:, None]] = False
    wrong_prefix = np.cumsum(padded_wrong, axis=1)
    return wrong_prefix[rows, col] / T


def exits_for(dataset: Dataset, policy: StoppingPolicy, pipeline: SignalSpec | None = None):
    """(step, trigger) column vectors for one policy over a dataset."""
    name = policy.signal if not isinstance(policy, DualPolicy) else policy.upper.signal
    if not has_signal(dataset, name):
        raise KeyError(f"unknown signal {name!r}; catalog is {list(dataset.signal_catalog)}")
    spec = pipeline if pipeline is not None else default_spec(name)
    S = dataset_series(dataset, spec)
    a = dataset.arrays
    up = lo = None
    if isinstance(policy, (UpperPolicy, DualPolicy)):
        lam = policy.lambda_plus if isinstance(policy, UpperPolicy) else policy.upper.lambda_plus
        up = upper_exit_matrix(S, np.array([lam]))
    if isinstance(policy, (LowerPolicy, DualPolicy)):
        lp = policy if isinstance(policy, LowerPolicy) else policy.lower
        budgets = a.budgets if lp.budget_tokens_override is None else np.full_like(a.budgets, lp.budget_tokens_override)
        lo = lower_exit_matrix(S, a.tokens, budgets, np.array([lp.c]), lp.cap)
    return combine_exits(up, lo, a.lengths)


def empirical_risk(
    dataset: Dataset, policy: StoppingPolicy, loss: LossKind, pipeline: SignalSpec | None = None
) -> float:
    if len(dataset) == 0:
        raise ValueError("empirical risk of an empty dataset")
    step, trigger = exits_for(dataset, policy, pipeline)
    return float(column_means(loss_matrix(loss, dataset.arrays, step, trigger))[0])
