"""Stopping policies and the exit times they induce.

An upper policy stops and answers at the first step whose oriented signal
reaches ``lambda_plus``. A lower policy abstains at the first step whose
signal falls strictly below a sigmoid curve in cumulative tokens,
``cap * sigmoid(c * (tokens - B/2))``. A dual policy runs both on one channel
and exits at whichever fires first, or at the last step.

Scalar functions here operate on one trajectory. The ``*_matrix`` functions
evaluate many candidate parameters over a whole dataset at once; the
calibrator is built on those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

from .signals import SignalSpec, default_spec, series
from .trajectory import Trajectory

Trigger = Literal["upper", "lower", "budget"]

BUDGET, UPPER, LOWER = 0, 1, 2
TRIGGER_NAMES = {BUDGET: "budget", UPPER: "upper", LOWER: "lower"}


@dataclass(frozen=True)
class UpperPolicy:
    signal: str
    lambda_plus: float


@dataclass(frozen=True)
class LowerPolicy:
    signal: str
    c: float
    budget_tokens_override: int | None = None
    cap: float | None = None

    def __post_init__(self):
        if self.c < 0:
            raise ValueError(f"sigmoid sharpness c must be >= 0, got {self.c}")
        if self.budget_tokens_override is not None and self.budget_tokens_override <= 0:
            raise ValueError("budget_tokens_override must be positive")


@dataclass(frozen=True)
class DualPolicy:
    upper: UpperPolicy
    lower: LowerPolicy

    def __post_init__(self):
        if self.lower.signal != self.upper.signal:
            raise ValueError("dual policy must monitor a single channel")
        if self.lower.cap != self.upper.lambda_plus:
            raise ValueError("dual policy lower cap must equal lambda_plus")

    @classmethod
    def build(cls, signal: str, lambda_plus: float, c: float, budget_tokens_override=None):
        return cls(
            UpperPolicy(signal, lambda_plus),
            LowerPolicy(signal, c, budget_tokens_override, cap=lambda_plus),
        )

    @property
    def signal(self) -> str:
        return self.upper.signal


StoppingPolicy = Union[UpperPolicy, LowerPolicy, DualPolicy]


@dataclass(frozen=True)
class ExitOutcome:
    exit_step: int
    trigger: Trigger
    tokens_used: int
    correct_at_exit: bool


def sigmoid(z):
    """Logistic function, stable for large |z| in both directions."""
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out if out.ndim else float(out)


def sigmoid_threshold(cum_tokens, B: int, c: float, cap: float | None = None):
    if B <= 0:
        raise ValueError("budget B must be positive")
    if c < 0:
        raise ValueError("c must be non-negative")
    scale = 1.0 if cap is None else cap
    return scale * sigmoid(c * (np.asarray(cum_tokens, dtype=float) - B / 2))


def _spec_for(pipeline: SignalSpec | None, name: str) -> SignalSpec:
    spec = pipeline if pipeline is not None else default_spec(name)
    if spec.name != name:
        raise ValueError(f"pipeline is for {spec.name!r}, policy monitors {name!r}")
    return spec


def upper_exit(traj: Trajectory, policy: UpperPolicy, pipeline: SignalSpec | None = None):
    s = series(traj, _spec_for(pipeline, policy.signal))
    for t, v in enumerate(s, start=1):
        if v >= policy.lambda_plus:
            return t
    return None


def lower_exit(traj: Trajectory, policy: LowerPolicy, pipeline: SignalSpec | None = None):
    s = series(traj, _spec_for(pipeline, policy.signal))
    B = policy.budget_tokens_override or traj.budget_tokens
    for t, (v, step) in enumerate(zip(s, traj.steps), start=1):
        if v < sigmoid_threshold(step.cum_tokens, B, policy.c, policy.cap):
            return t
    return None


def _outcome(traj: Trajectory, step: int, trigger: Trigger) -> ExitOutcome:
    rec = traj.steps[step - 1]
    return ExitOutcome(step, trigger, rec.cum_tokens, rec.correct)


def exit_outcome(traj: Trajectory, policy: StoppingPolicy, pipeline: SignalSpec | None = None) -> ExitOutcome:
    """Outcome of running any policy on a recorded trajectory."""
    if isinstance(policy, DualPolicy):
        return dual_exit(traj, policy, pipeline)
    if isinstance(policy, UpperPolicy):
        t = upper_exit(traj, policy, pipeline)
        return _outcome(traj, t, "upper") if t else _outcome(traj, traj.T, "budget")
    if isinstance(policy, LowerPolicy):
        t = lower_exit(traj, policy, pipeline)
        return _outcome(traj, t, "lower") if t else _outcome(traj, traj.T, "budget")
    raise TypeError(f"not a stopping policy: {policy!r}")


def dual_exit(traj: Trajectory, policy: DualPolicy, pipeline: SignalSpec | None = None) -> ExitOutcome:
    up = upper_exit(traj, policy.upper, pipeline)
    lo = lower_exit(traj, policy.lower, pipeline)
    up = up if up is not None else math.inf
    lo = lo if lo is not None else math.inf
    if up <= lo and up <= traj.T:
        return _outcome(traj, up, "upper")
    if lo <= traj.T:
        return _outcome(traj, lo, "lower")
    return _outcome(traj, traj.T, "budget")


# -- vectorised over (trajectory, candidate) ----------------------------------

_CHUNK = 1 << 22  # max cells per broadcast block


def upper_exit_matrix(S: np.ndarray, lambdas: np.ndarray) -> np.ndarray:
    """First 1-based step with S >= lambda, per row and lambda; 0 when none.

    ``S`` is (n, Tmax) with NaN padding.
    """
    n, tmax = S.shape
    lambdas = np.asarray(lambdas, dtype=float)
    out = np.zeros((n, lambdas.size), dtype=np.int64)
    if tmax == 0 or lambdas.size == 0:
        return out
    # running max is non-decreasing, so the first crossing is a sorted search
    filled = np.where(np.isnan(S), -np.inf, S)
    runmax = np.maximum.accumulate(filled, axis=1)
    for i in range(n):
        k = np.searchsorted(runmax[i], lambdas, side="left")
        out[i] = np.where(k < tmax, k + 1, 0)
    return out


def lower_exit_matrix(
    S: np.ndarray,
    tokens: np.ndarray,
    budgets: np.ndarray,
    cs: np.ndarray,
    cap: float | None = None,
) -> np.ndarray:
    """First 1-based step with S < cap*sigmoid(c*(tokens - B/2)); 0 when none."""
    n, tmax = S.shape
    cs = np.asarray(cs, dtype=float)
    out = np.zeros((n, cs.size), dtype=np.int64)
    if tmax == 0 or cs.size == 0:
        return out
    scale = 1.0 if cap is None else cap
    centred = tokens.astype(float) - budgets[:, None] / 2
    rows = max(1, _CHUNK // max(1, tmax * cs.size))
    for lo in range(0, n, rows):
        blk = slice(lo, lo + rows)
        curve = scale * sigmoid(cs[None, None, :] * centred[blk, :, None])
        fired = S[blk, :, None] < curve  # NaN padding compares False
        any_fired = fired.any(axis=1)
        first = fired.argmax(axis=1) + 1
        out[blk] = np.where(any_fired, first, 0)
    return out


def combine_exits(
    upper: np.ndarray | None, lower: np.ndarray | None, lengths: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exit step and trigger code for min(tau+, tau-, T); ties go to upper."""
    ref = upper if upper is not None else lower
    big = np.iinfo(np.int64).max
    up = np.where(upper > 0, upper, big) if upper is not None else np.full(ref.shape, big)
    lo = np.where(lower > 0, lower, big) if lower is not None else np.full(ref.shape, big)
    T = np.broadcast_to(lengths[:, None], ref.shape)
    step = np.minimum(np.minimum(up, lo), T)
    trigger = np.full(ref.shape, BUDGET, dtype=np.int8)
    trigger[lo == step] = LOWER
    trigger[up == step] = UPPER
    return step.astype(np.int64), trigger


def policy_to_dict(policy: StoppingPolicy) -> dict:
    if isinstance(policy, UpperPolicy):
        return {"signal": policy.signal, "lambda_plus": policy.lambda_plus}
    if isinstance(policy, LowerPolicy):
        return {
            "signal": policy.signal,
            "c": policy.c,
            "cap": policy.cap,
            "budget_tokens_override": policy.budget_tokens_override,
        }
    return {
        "signal": policy.signal,
        "lambda_plus": policy.upper.lambda_plus,
        "c": policy.lower.c,
        "cap": policy.lower.cap,
        "budget_tokens_override": policy.lower.budget_tokens_override,
    }


def policy_from_dict(d: dict) -> StoppingPolicy:
    has_up = d.get("lambda_plus") is not None
    has_lo = d.get("c") is not None
    if has_up and has_lo:
        return DualPolicy.build(d["signal"], d["lambda_plus"], d["c"], d.get("budget_tokens_override"))
    if has_up:
        return UpperPolicy(d["signal"], d["lambda_plus"])
    if has_lo:
        return LowerPolicy(d["signal"], d["c"], d.get("budget_tokens_override"), d.get("cap"))
    raise ValueError("policy needs lambda_plus and/or c")
