import numpy as np
import pytest

from conformal_stop.trajectory import Dataset, StepRecord, Trajectory


def make_traj(signal, correct, tokens=None, budget=None, tid="t0", name="s", extra=None):
    """Build a trajectory from per-step lists; tokens default to 100 per step."""
    T = len(signal)
    if tokens is None:
        tokens = [100 * (k + 1) for k in range(T)]
    if budget is None:
        budget = tokens[-1]
    steps = []
    for k in range(T):
        sig = {name: float(signal[k])}
        if extra:
            sig.update({n: float(v[k]) for n, v in extra.items()})
        steps.append(StepRecord(k + 1, int(tokens[k]), sig, bool(correct[k])))
    return Trajectory(tid, int(budget), tuple(steps))


def random_dataset(rng, n, tmin=1, tmax=12, names=("s",), budget_slack=3):
    trajs = []
    for i in range(n):
        T = int(rng.integers(tmin, tmax + 1))
        per_step = rng.integers(1, 200, size=T)
        tokens = np.cumsum(per_step)
        budget = int(tokens[-1] * rng.uniform(1.0, budget_slack))
        correct = rng.random(T) < rng.uniform(0, 1)
        steps = []
        for k in range(T):
            sig = {nm: float(np.round(rng.random(), 3)) for nm in names}
            steps.append(StepRecord(k + 1, int(tokens[k]), sig, bool(correct[k])))
        trajs.append(Trajectory(f"r{i:04d}", max(budget, int(tokens[-1])), tuple(steps)))
    return Dataset(tuple(trajs))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
CRITERIA: dict[int, str] = {}


def record_criterion(number: int, title: str, ok: bool, detail: str = "") -> bool:
    CRITERIA[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
    print(CRITERIA[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
