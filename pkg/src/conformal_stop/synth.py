"""Seeded synthetic trajectory populations.

Two regimes. Solvable instances have a confidence channel that drifts up a
logistic curve; their answer becomes correct once the noiseless drift reaches
its midpoint level and stays correct. Unsolvable instances hover around a
low, mean-reverting level and are correct only by occasional lucky guesses.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .policy import sigmoid
from .trajectory import Dataset, StepRecord, Trajectory


@dataclass(frozen=True)
class SolvableDynamics:
    midpoint: float = 6.0  # step where the drift crosses its midpoint level
    steepness: float = 1.0
    noise: float = 0.03
    midpoint_jitter: int = 3  # per-instance integer shift, uniform in [-j, j]
    low: float = 0.1
    high: float = 0.95

    @property
    def correct_level(self) -> float:
        return self.low + (self.high - self.low) * 0.5


@dataclass(frozen=True)
class UnsolvableDynamics:
    level: float = 0.2
    noise: float = 0.05
    guess_prob: float = 0.002
    reversion: float = 0.5  # AR(1) coefficient towards the instance level
    level_spread: float = 0.0  # stdev of the per-instance level


@dataclass(frozen=True)
class SynthConfig:
    population: int = 1000
    solvable_fraction: float = 0.5
    steps: int = 20
    tokens_per_step: int = 100
    budget_tokens: int = 2000
    solvable: SolvableDynamics = field(default_factory=SolvableDynamics)
    unsolvable: UnsolvableDynamics = field(default_factory=UnsolvableDynamics)
    seed: int = 0
    signal_name: str = "confidence"
    id_prefix: str = "syn-"
    flicker_prob: float = 0.0

    def __post_init__(self):
        if isinstance(self.solvable, dict):
            object.__setattr__(self, "solvable", SolvableDynamics(**self.solvable))
        if isinstance(self.unsolvable, dict):
            object.__setattr__(self, "unsolvable", UnsolvableDynamics(**self.unsolvable))
        self.validate()

    def validate(self):
        if self.population <= 0:
            raise ValueError("population must be positive")
        if not 0.0 <= self.solvable_fraction <= 1.0:
            raise ValueError(f"solvable_fraction must lie in [0, 1], got {self.solvable_fraction}")
        if self.steps <= 0 or self.tokens_per_step <= 0 or self.budget_tokens <= 0:
            raise ValueError("steps, tokens_per_step and budget_tokens must be positive")
        if self.budget_tokens < self.steps * self.tokens_per_step:
            raise ValueError("budget_tokens must be at least steps * tokens_per_step")
        if not 0.0 <= self.unsolvable.guess_prob <= 1.0:
            raise ValueError("guess_prob must lie in [0, 1]")
        if not 0.0 <= self.flicker_prob <= 1.0:
            raise ValueError("flicker_prob must lie in [0, 1]")
        if not 0.0 <= self.solvable.low <= self.solvable.high <= 1.0:
            raise ValueError("solvable drift must satisfy 0 <= low <= high <= 1")
        if min(self.solvable.noise, self.unsolvable.noise, self.unsolvable.level_spread) < 0:
            raise ValueError("noise levels must be non-negative")

    @property
    def n_solvable(self) -> int:
        return int(round(self.population * self.solvable_fraction))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        return cls(**d)


def _solvable(cfg: SynthConfig, rng: np.random.Generator):
    dyn = cfg.solvable
    t = np.arange(1, cfg.steps + 1, dtype=float)
    shift = rng.integers(-dyn.midpoint_jitter, dyn.midpoint_jitter + 1) if dyn.midpoint_jitter else 0
    mid = float(np.clip(dyn.midpoint + shift, 1, cfg.steps))
    drift = dyn.low + (dyn.high - dyn.low) * sigmoid(dyn.steepness * (t - mid))
    correct = drift >= dyn.correct_level
    if cfg.flicker_prob > 0:
        correct &= rng.random(cfg.steps) >= cfg.flicker_prob
    noise = rng.normal(0.0, dyn.noise, cfg.steps) if dyn.noise > 0 else 0.0
    return np.clip(drift + noise, 0.0, 1.0), correct


def _unsolvable(cfg: SynthConfig, rng: np.random.Generator):
    dyn = cfg.unsolvable
    level = dyn.level + (rng.normal(0.0, dyn.level_spread) if dyn.level_spread > 0 else 0.0)
    eps = rng.normal(0.0, dyn.noise, cfg.steps) if dyn.noise > 0 else np.zeros(cfg.steps)
    z = np.empty(cfg.steps)
    z[0] = level + eps[0]
    for k in range(1, cfg.steps):
        z[k] = level + dyn.reversion * (z[k - 1] - level) + eps[k]
    correct = rng.random(cfg.steps) < dyn.guess_prob
    return np.clip(z, 0.0, 1.0), correct


def generate(config: SynthConfig) -> Dataset:
    """Generate a population; identical output for identical config."""
    config.validate()
    n = config.population
    classes = np.zeros(n, dtype=bool)
    classes[: config.n_solvable] = True
    classes = np.random.default_rng([config.seed, n]).permutation(classes)
    tokens = [config.tokens_per_step * (k + 1) for k in range(config.steps)]
    trajs = []
    for i in range(n):
        rng = np.random.default_rng([config.seed, i])
        values, correct = (_solvable if classes[i] else _unsolvable)(config, rng)
        steps = tuple(
            StepRecord(k + 1, tokens[k], {config.signal_name: float(values[k])}, bool(correct[k]))
            for k in range(config.steps)
        )
        trajs.append(
            Trajectory(
                f"{config.id_prefix}{i:06d}",
                config.budget_tokens,
                steps,
                {"regime": "solvable" if classes[i] else "unsolvable", "source": "synthetic"},
            )
        )
    return Dataset(tuple(trajs))


def with_lagged_channel(dataset: Dataset, source: str, name: str, lag: int) -> Dataset:
    """Add a channel that repeats ``source`` delayed by ``lag`` steps.

    The first ``lag`` steps hold the first value, so constant series are
    unchanged and monotone series reach every level exactly ``lag`` steps later.
    """
    if lag < 0:
        raise ValueError("lag must be non-negative")
    out = []
    for traj in dataset:
        vals = [s.raw_signals[source] for s in traj.steps]
        steps = tuple(
            replace(s, raw_signals={**s.raw_signals, name: vals[max(0, k - lag)]})
            for k, s in enumerate(traj.steps)
        )
        out.append(replace(traj, steps=steps))
    return Dataset(tuple(out))


def length_shift_pair(
    base: SynthConfig, factor: int = 2
) -> tuple[SynthConfig, SynthConfig]:
    """(short, long) configs sharing a token budget; long runs ``factor`` times the steps.

    Solvable dynamics stretch with the horizon, so the long population reaches
    its answers later in both steps and tokens.
    """
    dyn = base.solvable
    long = replace(
        base,
        steps=base.steps * factor,
        solvable=replace(
            dyn,
            midpoint=dyn.midpoint * factor,
            steepness=dyn.steepness / factor,
            midpoint_jitter=dyn.midpoint_jitter * factor,
        ),
        budget_tokens=max(base.budget_tokens, base.steps * factor * base.tokens_per_step),
        id_prefix=base.id_prefix + "long-",
    )
    short = replace(base, budget_tokens=long.budget_tokens, id_prefix=base.id_prefix + "short-")
    return short, long
