import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_stop.losses import (
    LossKind,
    eff_lower_loss,
    eff_upper_loss,
    empirical_risk,
    exact_mean,
    fn_loss,
    fp_loss,
    instance_loss,
)
from conformal_stop.policy import DualPolicy, ExitOutcome, LowerPolicy, UpperPolicy, exit_outcome
from conformal_stop.trajectory import Dataset

from conftest import make_traj, random_dataset
from oracles import losses_at, scan_exit


def out(step, trigger, correct=False):
    return ExitOutcome(step, trigger, 100 * step, correct)


T4 = make_traj([0.0] * 4, [0, 0, 0, 1])


def test_fp_examples():
    assert fp_loss(T4, out(2, "upper", False)) == 1.0
    assert fp_loss(T4, out(4, "budget", False)) == 0.0
    assert fp_loss(T4, out(4, "budget", True)) == 0.0
    assert fp_loss(T4, out(4, "upper", True)) == 0.0


def test_fn_examples():
    assert fn_loss(T4, out(3, "lower")) == 0.5
    assert fn_loss(make_traj([0] * 5, [1, 1, 0, 0, 0]), out(3, "lower")) == 0.0
    assert fn_loss(make_traj([0] * 5, [1] * 5), out(1, "lower")) == 1.0
    assert fn_loss(make_traj([0] * 5, [1] * 5), out(5, "budget")) == 0.0


def test_eff_upper_examples():
    t = make_traj([0] * 10, [0, 0, 0, 1] + [1] * 6)
    assert t.first_correct == 4
    assert eff_upper_loss(t, out(7, "upper")) == pytest.approx(0.3)
    assert eff_upper_loss(t, out(3, "upper")) == 0.0
    assert eff_upper_loss(t, out(4, "upper")) == 0.0
    assert eff_upper_loss(make_traj([0] * 10, [0] * 10), out(10, "budget")) == 0.0


def test_eff_lower_examples():
    t = make_traj([0] * 10, [0] * 10)
    assert eff_lower_loss(t, out(5, "lower")) == 0.5
    assert eff_lower_loss(t, out(10, "budget")) == 1.0
    assert eff_lower_loss(make_traj([0] * 6, [1] * 6), out(4, "lower")) == 0.0


def test_empirical_risk_examples():
    # fp losses [1, 0, 0, 1]: wrong/right/never-fires/wrong at a lambda of 0.5
    ds = Dataset((
        make_traj([0.9], [0], tid="a"),
        make_traj([0.9], [1], tid="b"),
        make_traj([0.1], [0], tid="c"),
        make_traj([0.6], [0], tid="d"),
    ))
    assert empirical_risk(ds, UpperPolicy("s", 0.5), LossKind.FALSE_POSITIVE_UPPER) == 0.5
    assert empirical_risk(ds, UpperPolicy("s", 2.0), LossKind.FALSE_POSITIVE_UPPER) == 0.0
    single = Dataset((make_traj([0.9, 0.9], [0, 1]),))
    assert empirical_risk(single, UpperPolicy("s", 0.5), LossKind.FALSE_POSITIVE_UPPER) == 1.0


def test_empirical_risk_errors():
    with pytest.raises(ValueError):
        empirical_risk(Dataset(()), UpperPolicy("s", 0.5), LossKind.FALSE_POSITIVE_UPPER)
    ds = Dataset((make_traj([0.9], [0]),))
    with pytest.raises(KeyError):
        empirical_risk(ds, UpperPolicy("zzz", 0.5), LossKind.FALSE_POSITIVE_UPPER)


def test_exact_mean_is_order_independent():
    vals = [0.1] * 7 + [1e-17, 0.3, 1 / 3]
    assert exact_mean(vals) == exact_mean(vals[::-1])
    with pytest.raises(ValueError):
        exact_mean([])


def _policies(rng):
    """(policy, lam, c, cap) tuples in the oracle's argument form."""
    lam = float(rng.random())
    c = float(10 ** rng.uniform(-5, 0))
    return [
        (UpperPolicy("s", lam), lam, None, None),
        (LowerPolicy("s", c), None, c, None),
        (DualPolicy.build("s", lam, c), lam, c, lam),
    ]


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_losses_bounded_exclusive_and_match_oracle(seed):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, 6)
    for pol, lam, c, cap in _policies(rng):
        for t in ds:
            o = exit_outcome(t, pol)
            assert (o.exit_step, o.trigger) == scan_exit(t, "s", lam=lam, c=c, cap=cap)
            vals = {k: instance_loss(k, t, o) for k in LossKind}
            assert all(0.0 <= v <= 1.0 for v in vals.values())
            assert vals[LossKind.FALSE_POSITIVE_UPPER] * vals[LossKind.FALSE_NEGATIVE_LOWER] == 0
            ref = losses_at(t, o.exit_step, o.trigger)
            assert vals[LossKind.FALSE_POSITIVE_UPPER] == ref["fp"]
            assert vals[LossKind.FALSE_NEGATIVE_LOWER] == ref["fn"]
            assert vals[LossKind.EFFICIENCY_UPPER] == ref["eff_up"]
            assert vals[LossKind.EFFICIENCY_LOWER] == ref["eff_lo"]
        for kind in LossKind:
            want = exact_mean(instance_loss(kind, t, exit_outcome(t, pol)) for t in ds)
            assert empirical_risk(ds, pol, kind) == want
