"""Trajectory data model, line-delimited JSON ingestion, and dataset splitting.

A trajectory is one instance's sequence of reasoning steps. Each step carries
the cumulative token count, whether the forced answer at that step was
correct, and a value per uncertainty channel. Steps are already chunked
upstream; nothing here touches text.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Literal, Mapping, Sequence

import numpy as np

from .signals import AnswerTokenRecord, confidence_signal, eat_signal

log = logging.getLogger(__name__)

Strictness = Literal["strict", "lenient"]

_STEP_KEYS = frozenset({"t", "tokens", "correct", "signals", "token_records"})


class IngestError(ValueError):
    """Raised when a trajectory file violates the record format or invariants."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


@dataclass(frozen=True)
class StepRecord:
    step_index: int
    cum_tokens: int
    raw_signals: Mapping[str, float]
    correct: bool
    token_record: AnswerTokenRecord | None = None


@dataclass(frozen=True)
class Trajectory:
    id: str
    budget_tokens: int
    steps: tuple[StepRecord, ...]
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "meta", dict(self.meta))
        validate_trajectory(self)

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def signal_names(self) -> frozenset[str]:
        return frozenset(self.steps[0].raw_signals)

    @cached_property
    def solvable(self) -> bool:
        return any(s.correct for s in self.steps)

    @cached_property
    def first_correct(self) -> int | None:
        """1-based index of the first correct step, None if never correct."""
        for s in self.steps:
            if s.correct:
                return s.step_index
        return None

    @cached_property
    def tokens(self) -> np.ndarray:
        return np.array([s.cum_tokens for s in self.steps], dtype=np.int64)

    @cached_property
    def correct_flags(self) -> np.ndarray:
        return np.array([s.correct for s in self.steps], dtype=bool)

    def signal(self, name: str) -> np.ndarray:
        if name not in self.steps[0].raw_signals:
            raise KeyError(f"unknown signal {name!r} in trajectory {self.id!r}")
        return np.array([s.raw_signals[name] for s in self.steps], dtype=float)


def validate_trajectory(traj: Trajectory) -> None:
    if not traj.steps:
        raise ValueError(f"trajectory {traj.id!r} has no steps")
    if traj.budget_tokens <= 0:
        raise ValueError(f"trajectory {traj.id!r}: budget_tokens must be positive")
    keys = frozenset(traj.steps[0].raw_signals)
    prev_tokens = 0
    for expected, step in enumerate(traj.steps, start=1):
        if step.step_index != expected:
            raise ValueError(
                f"trajectory {traj.id!r}: step indices must be 1..T consecutive, "
                f"got {step.step_index} at position {expected}"
            )
        if step.cum_tokens < prev_tokens:
            raise ValueError(
                f"trajectory {traj.id!r}: cum_tokens decreases at step {expected} "
                f"({prev_tokens} -> {step.cum_tokens})"
            )
        if frozenset(step.raw_signals) != keys:
            raise ValueError(
                f"trajectory {traj.id!r}: inconsistent signal keys at step {expected}"
            )
        prev_tokens = step.cum_tokens
    if prev_tokens > traj.budget_tokens:
        raise ValueError(
            f"trajectory {traj.id!r}: final cum_tokens {prev_tokens} exceeds "
            f"budget {traj.budget_tokens}"
        )


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[Trajectory, ...]
    signal_catalog: tuple[str, ...] = ()

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        ids = [t.id for t in trajs]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ValueError(f"duplicate trajectory id {dup!r}")
        if trajs:
            keys = trajs[0].signal_names
            for t in trajs[1:]:
                if t.signal_names != keys:
                    raise ValueError(
                        f"trajectory {t.id!r} signal keys {sorted(t.signal_names)} "
                        f"differ from catalog {sorted(keys)}"
                    )
            catalog = tuple(sorted(keys))
        else:
            catalog = tuple(sorted(self.signal_catalog))
        object.__setattr__(self, "signal_catalog", catalog)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def __getitem__(self, i: int) -> Trajectory:
        return self.trajectories[i]

    @property
    def ids(self) -> list[str]:
        return [t.id for t in self.trajectories]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        idx = list(indices)
        sub = Dataset(tuple(self.trajectories[i] for i in idx), self.signal_catalog)
        if "arrays" in self.__dict__:
            sub.__dict__["arrays"] = self.arrays.take(np.asarray(idx, dtype=np.int64))
        return sub

    @cached_property
    def arrays(self) -> "PaddedArrays":
        return PaddedArrays.from_trajectories(self.trajectories)

    @cached_property
    def _transform_cache(self) -> dict:
        return {}


@dataclass(frozen=True)
class PaddedArrays:
    """Step-aligned arrays for a dataset, right-padded to the longest trajectory.

    Padded signal cells are NaN so every threshold comparison on them is false.
    """

    lengths: np.ndarray  # (n,)
    budgets: np.ndarray  # (n,)
    tokens: np.ndarray  # (n, Tmax), padded with the final count
    correct: np.ndarray  # (n, Tmax) bool, padded False
    signals: Mapping[str, np.ndarray]  # name -> (n, Tmax) float, NaN padded

    @classmethod
    def from_trajectories(cls, trajs: Sequence[Trajectory]) -> "PaddedArrays":
        n = len(trajs)
        tmax = max((t.T for t in trajs), default=0)
        lengths = np.array([t.T for t in trajs], dtype=np.int64)
        budgets = np.array([t.budget_tokens for t in trajs], dtype=np.int64)
        tokens = np.zeros((n, tmax), dtype=np.int64)
        correct = np.zeros((n, tmax), dtype=bool)
        names = sorted(trajs[0].signal_names) if trajs else []
        signals = {name: np.full((n, tmax), np.nan) for name in names}
        for i, t in enumerate(trajs):
            T = t.T
            tokens[i, :T] = t.tokens
            tokens[i, T:] = t.tokens[-1]
            correct[i, :T] = t.correct_flags
            for name in names:
                signals[name][i, :T] = t.signal(name)
        return cls(lengths, budgets, tokens, correct, signals)

    def take(self, idx: np.ndarray) -> "PaddedArrays":
        return PaddedArrays(
            self.lengths[idx],
            self.budgets[idx],
            self.tokens[idx],
            self.correct[idx],
            {k: v[idx] for k, v in self.signals.items()},
        )

    @property
    def solvable(self) -> np.ndarray:
        return self.correct.any(axis=1)


# -- line-delimited JSON format ------------------------------------------------


def _step_from_json(obj: dict, strict: bool) -> StepRecord:
    if not isinstance(obj, dict):
        raise ValueError("step must be an object")
    unknown = set(obj) - _STEP_KEYS
    if unknown and strict:
        raise ValueError(f"unknown step keys {sorted(unknown)}")
    for key in ("t", "tokens", "correct", "signals"):
        if key not in obj:
            raise ValueError(f"step missing {key!r}")
    t, tokens, correct = obj["t"], obj["tokens"], obj["correct"]
    if not isinstance(t, int) or isinstance(t, bool) or t < 1:
        raise ValueError(f"step 't' must be a positive integer, got {t!r}")
    if not isinstance(tokens, int) or isinstance(tokens, bool) or tokens < 0:
        raise ValueError(f"step 'tokens' must be a non-negative integer, got {tokens!r}")
    if correct not in (0, 1) or isinstance(correct, float):
        raise ValueError(f"step 'correct' must be 0 or 1, got {correct!r}")
    raw = obj["signals"]
    if not isinstance(raw, dict):
        raise ValueError("step 'signals' must be an object")
    sig = {}
    for name, value in raw.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"signal {name!r} must be a number")
        if not math.isfinite(value):
            raise ValueError(f"signal {name!r} must be finite")
        sig[name] = float(value)
    record = None
    if "token_records" in obj:
        tr = obj["token_records"]
        record = AnswerTokenRecord(
            answer_logprobs=tuple(float(v) for v in tr["answer_logprobs"]),
            next_token_entropy=float(tr["next_token_entropy"]),
        )
        sig.setdefault("confidence", confidence_signal(record))
        sig.setdefault("eat", eat_signal(record))
    return StepRecord(t, tokens, sig, bool(correct), record)


def trajectory_from_json(obj: dict, strict: bool = True) -> Trajectory:
    if not isinstance(obj, dict):
        raise ValueError("record must be an object")
    for key in ("id", "budget_tokens", "steps"):
        if key not in obj:
            raise ValueError(f"record missing {key!r}")
    if not isinstance(obj["id"], str):
        raise ValueError("'id' must be a string")
    budget = obj["budget_tokens"]
    if not isinstance(budget, int) or isinstance(budget, bool):
        raise ValueError("'budget_tokens' must be an integer")
    meta = obj.get("meta", {})
    if not isinstance(meta, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in meta.items()
    ):
        raise ValueError("'meta' must map strings to strings")
    if not isinstance(obj["steps"], list):
        raise ValueError("'steps' must be a list")
    steps = tuple(_step_from_json(s, strict) for s in obj["steps"])
    return Trajectory(obj["id"], budget, steps, meta)


def trajectory_to_json(traj: Trajectory) -> dict:
    steps = []
    for s in traj.steps:
        rec = {
            "t": s.step_index,
            "tokens": s.cum_tokens,
            "correct": int(s.correct),
            "signals": dict(sorted(s.raw_signals.items())),
        }
        if s.token_record is not None:
            rec["token_records"] = {
                "answer_logprobs": list(s.token_record.answer_logprobs),
                "next_token_entropy": s.token_record.next_token_entropy,
            }
        steps.append(rec)
    return {
        "id": traj.id,
        "budget_tokens": traj.budget_tokens,
        "meta": dict(sorted(traj.meta.items())),
        "steps": steps,
    }


@dataclass(frozen=True)
class DropRecord:
    line: int
    id: str | None
    reason: str


def ingest_with_report(
    path: str | Path, strictness: Strictness = "strict"
) -> tuple[Dataset, list[DropRecord]]:
    """Read a trajectory file; in lenient mode also return what was dropped."""
    if strictness not in ("strict", "lenient"):
        raise ValueError(f"strictness must be 'strict' or 'lenient', got {strictness!r}")
    strict = strictness == "strict"
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"trajectory file not found: {path}")

    kept: list[Trajectory] = []
    drops: list[DropRecord] = []
    seen: set[str] = set()
    catalog: frozenset[str] | None = None

    def reject(lineno: int, tid: str | None, reason: str):
        if strict:
            raise IngestError(reason, line=lineno)
        drops.append(DropRecord(lineno, tid, reason))

    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            tid = None
            try:
                obj = json.loads(line)
                if isinstance(obj, dict) and isinstance(obj.get("id"), str):
                    tid = obj["id"]
                traj = trajectory_from_json(obj, strict=strict)
            except (ValueError, TypeError, KeyError) as exc:
                reject(lineno, tid, f"malformed record: {exc}")
                continue
            if traj.id in seen:
                reject(lineno, traj.id, f"duplicate id {traj.id!r}")
                continue
            if catalog is None:
                catalog = traj.signal_names
            elif traj.signal_names != catalog:
                reject(
                    lineno,
                    traj.id,
                    f"inconsistent signal keys {sorted(traj.signal_names)}, "
                    f"expected {sorted(catalog)}",
                )
                continue
            seen.add(traj.id)
            kept.append(traj)

    if drops:
        log.warning("dropped %d record(s) from %s", len(drops), path)
    return Dataset(tuple(kept)), drops


def ingest(path: str | Path, strictness: Strictness = "strict") -> Dataset:
    return ingest_with_report(path, strictness)[0]


def dumps(dataset: Dataset) -> str:
    return "".join(
        json.dumps(trajectory_to_json(t), separators=(",", ":")) + "\n" for t in dataset
    )


def emit(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps(dataset), encoding="utf-8")


# -- splitting ----------------------------------------------------------------


def split_indices(
    n: int, validation_size: int, seed: int, strata: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Random (validation, test) index partition; both halves sorted ascending."""
    if validation_size <= 0:
        raise ValueError("validation_size must be positive")
    if validation_size >= n:
        raise ValueError(
            f"validation_size {validation_size} must be smaller than dataset size {n}"
        )
    rng = np.random.default_rng(seed)
    if strata is None:
        val = rng.permutation(n)[:validation_size]
    else:
        # proportional allocation, largest remainder, then random within class
        strata = np.asarray(strata)
        classes = np.unique(strata)
        counts = np.array([(strata == c).sum() for c in classes])
        exact = validation_size * counts / n
        alloc = np.floor(exact).astype(int)
        order = np.argsort(-(exact - alloc), kind="stable")
        alloc[order[: validation_size - alloc.sum()]] += 1
        parts = []
        for c, k in zip(classes, alloc):
            members = np.flatnonzero(strata == c)
            parts.append(rng.permutation(members)[:k])
        val = np.concatenate(parts)
    mask = np.zeros(n, dtype=bool)
    mask[val] = True
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def split(
    dataset: Dataset, validation_size: int, seed: int, stratify: bool = False
) -> tuple[Dataset, Dataset]:
    strata = dataset.arrays.solvable if stratify else None
    val, test = split_indices(len(dataset), validation_size, seed, strata)
    return dataset.subset(val), dataset.subset(test)


def subsample_by_ratio(
    dataset: Dataset, solvable_to_unsolvable: tuple[int, int], size: int, seed: int
) -> Dataset:
    """Draw `size` trajectories with an exact solvable:unsolvable composition.

    When `size` does not divide evenly the solvable class gets the extra one.
    """
    a, b = solvable_to_unsolvable
    if a < 0 or b < 0 or a + b == 0:
        raise ValueError(f"invalid ratio {a}:{b}")
    if size <= 0:
        raise ValueError("size must be positive")
    n_solv = -((-size * a) // (a + b))
    n_unsolv = size - n_solv
    solvable = np.array([t.solvable for t in dataset], dtype=bool)
    pool_s = np.flatnonzero(solvable)
    pool_u = np.flatnonzero(~solvable)
    if len(pool_s) < n_solv or len(pool_u) < n_unsolv:
        raise ValueError(
            f"need {n_solv} solvable + {n_unsolv} unsolvable, dataset has "
            f"{len(pool_s)} + {len(pool_u)}"
        )
    rng = np.random.default_rng(seed)
    picked = np.concatenate(
        [
            rng.choice(pool_s, size=n_solv, replace=False),
            rng.choice(pool_u, size=n_unsolv, replace=False),
        ]
    )
    return dataset.subset(np.sort(picked))
