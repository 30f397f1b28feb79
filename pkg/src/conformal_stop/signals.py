"""Uncertainty channels: raw signal formulas, orientation, and smoothing.

Every channel handed to a stopping policy is oriented so that larger values
mean more confidence. Smoothing transforms are causal: the value at step t
depends only on steps 1..t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Literal, Sequence

import numpy as np

if TYPE_CHECKING:
    from .trajectory import Dataset, Trajectory

Orientation = Literal["higher_confident", "lower_confident"]

# Virtual channel: cumulative token count, always available.
TOKENS = "tokens"

EMA_PRESET_ALPHA = 0.3


@dataclass(frozen=True)
class Transform:
    kind: Literal["identity", "ema"] = "identity"
    alpha: float = 1.0

    def __post_init__(self):
        if self.kind not in ("identity", "ema"):
            raise ValueError(f"unknown transform {self.kind!r}")
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"ema alpha must lie in (0, 1], got {self.alpha}")

    @classmethod
    def ema(cls, alpha: float = EMA_PRESET_ALPHA) -> "Transform":
        return cls("ema", alpha)

    def __str__(self) -> str:
        return "identity" if self.kind == "identity" else f"ema={self.alpha:g}"


IDENTITY = Transform()


@dataclass(frozen=True)
class SignalSpec:
    name: str
    orientation: Orientation = "higher_confident"
    transform: Transform = IDENTITY

    def __post_init__(self):
        if self.orientation not in ("higher_confident", "lower_confident"):
            raise ValueError(f"unknown orientation {self.orientation!r}")

    @classmethod
    def parse(cls, text: str) -> "SignalSpec":
        """Parse ``name[:lower|:higher][:ema=ALPHA]``."""
        name, *opts = text.split(":")
        if not name:
            raise ValueError(f"empty signal name in {text!r}")
        orientation: Orientation = "higher_confident"
        transform = IDENTITY
        for opt in opts:
            if opt in ("lower", "lower_confident"):
                orientation = "lower_confident"
            elif opt in ("higher", "higher_confident"):
                orientation = "higher_confident"
            elif opt == "ema":
                transform = Transform.ema()
            elif opt.startswith("ema="):
                transform = Transform.ema(float(opt[4:]))
            else:
                raise ValueError(f"unknown signal option {opt!r} in {text!r}")
        return cls(name, orientation, transform)

    def __str__(self) -> str:
        parts = [self.name]
        if self.orientation == "lower_confident":
            parts.append("lower")
        if self.transform.kind == "ema":
            parts.append(f"ema={self.transform.alpha:g}")
        return ":".join(parts)


@dataclass(frozen=True)
class AnswerTokenRecord:
    answer_logprobs: tuple[float, ...]
    next_token_entropy: float

    def __post_init__(self):
        object.__setattr__(self, "answer_logprobs", tuple(self.answer_logprobs))
        if any(lp > 0 for lp in self.answer_logprobs):
            raise ValueError("log-probabilities must be <= 0")
        if self.next_token_entropy < 0:
            raise ValueError("entropy must be non-negative")


def confidence_signal(record: AnswerTokenRecord) -> float:
    """Length-normalised log-likelihood of the forced answer tokens."""
    if not record.answer_logprobs:
        raise ValueError("confidence needs at least one answer token log-probability")
    return math.fsum(record.answer_logprobs) / len(record.answer_logprobs)


def eat_signal(record: AnswerTokenRecord) -> float:
    """Next-token entropy after the forcing prefix (low = confident)."""
    if record.next_token_entropy < 0:
        raise ValueError("entropy must be non-negative")
    return float(record.next_token_entropy)


def entropy(probs: Sequence[float]) -> float:
    """Shannon entropy in nats of a discrete distribution."""
    p = np.asarray(probs, dtype=float)
    if np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=1e-9):
        raise ValueError("probabilities must be non-negative and sum to 1")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


ORIENTATION_OF = {
    "confidence": "higher_confident",
    "eat": "lower_confident",
    TOKENS: "higher_confident",
}


def default_spec(name: str) -> SignalSpec:
    return SignalSpec(name, ORIENTATION_OF.get(name, "higher_confident"))


def orient(values, spec: SignalSpec) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    return -v if spec.orientation == "lower_confident" else v.copy()


def smooth(values, transform: Transform = IDENTITY) -> np.ndarray:
    """Apply a causal transform along the last axis.

    NaN cells (padding) are carried through untouched at the tail of a row.
    """
    v = np.asarray(values, dtype=float)
    if transform.kind == "identity" or transform.alpha == 1.0:
        return v.copy()
    if v.shape[-1] == 0:
        raise ValueError("ema needs a non-empty series")
    a = transform.alpha
    out = np.empty_like(v)
    out[..., 0] = v[..., 0]
    for t in range(1, v.shape[-1]):
        out[..., t] = a * v[..., t] + (1.0 - a) * out[..., t - 1]
    return out


def series(traj: "Trajectory", spec: SignalSpec) -> np.ndarray:
    """Oriented, smoothed series for one trajectory."""
    if spec.name == TOKENS and spec.name not in traj.signal_names:
        raw = traj.tokens.astype(float)
    else:
        raw = traj.signal(spec.name)
    return smooth(orient(raw, spec), spec.transform)


def dataset_series(dataset: "Dataset", spec: SignalSpec) -> np.ndarray:
    """Oriented, smoothed (n, Tmax) matrix for a dataset, NaN beyond each length."""
    cache = dataset._transform_cache
    if spec in cache:
        return cache[spec]
    arrays = dataset.arrays
    if spec.name in arrays.signals:
        raw = arrays.signals[spec.name]
    elif spec.name == TOKENS:
        raw = arrays.tokens.astype(float)
        pad = np.arange(raw.shape[1])[None, :] >= arrays.lengths[:, None]
        raw = np.where(pad, np.nan, raw)
    else:
        raise KeyError(f"unknown signal {spec.name!r}; catalog is {list(dataset.signal_catalog)}")
    out = smooth(orient(raw, spec), spec.transform)
    out.setflags(write=False)
    cache[spec] = out
    return out


def has_signal(dataset: "Dataset", name: str) -> bool:
    return name in dataset.signal_catalog or name == TOKENS
