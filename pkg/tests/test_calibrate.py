import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conformal_stop.calibrate import (
    CalibrationError,
    CandidateGrid,
    CandidateTable,
    GridMode,
    RiskBudget,
    adjusted_risk,
    build_grid,
    calibrate,
    calibrate_dual,
    hoeffding_correction,
    select_from_table,
)
from conformal_stop.losses import LossKind, empirical_risk
from conformal_stop.policy import UpperPolicy
from conformal_stop.signals import SignalSpec
from conformal_stop.synth import SynthConfig, generate
from conformal_stop.trajectory import Dataset

from conftest import make_traj, random_dataset
from oracles import brute_force_calibrate

FP = LossKind.FALSE_POSITIVE_UPPER
FN = LossKind.FALSE_NEGATIVE_LOWER
S = [SignalSpec("s")]


def test_hoeffding_values():
    assert hoeffding_correction(50, 0.05) == pytest.approx(0.17308183826022852, abs=1e-12)
    assert hoeffding_correction(50, 0.05) == pytest.approx(math.sqrt(math.log(20) / 100), abs=1e-6)
    assert hoeffding_correction(200, 0.05) == pytest.approx(hoeffding_correction(50, 0.05) / 2)
    assert hoeffding_correction(50, 0.05, 1) == hoeffding_correction(50, 0.05)
    with pytest.raises(ValueError):
        hoeffding_correction(0, 0.05)


def test_adjusted_risk_examples():
    # 5 of 50 trajectories stop wrongly -> empirical 0.10
    trajs = [make_traj([0.9], [i >= 5], tid=f"t{i}") for i in range(50)]
    ds = Dataset(tuple(trajs))
    pol = UpperPolicy("s", 0.5)
    assert empirical_risk(ds, pol, FP) == 0.1
    ucb = adjusted_risk(ds, pol, RiskBudget(FP, 0.2, 0.05, "ucb"))
    assert ucb == pytest.approx(0.2730818382602285, abs=1e-6)
    assert adjusted_risk(ds, pol, RiskBudget(FP, 0.2, 0.05, "naive")) == 0.1
    assert adjusted_risk(ds, pol, RiskBudget(FP, 0.2, 0.05, "ucb_union"), grid_size=1) == ucb
    assert adjusted_risk(ds, pol, RiskBudget(FP, 0.2, 0.05, "ucb_union"), grid_size=7) > ucb


def test_risk_budget_validation():
    with pytest.raises(ValueError):
        RiskBudget(LossKind.EFFICIENCY_UPPER, 0.1)
    with pytest.raises(ValueError):
        RiskBudget(FP, 1.5)
    with pytest.raises(ValueError):
        RiskBudget(FP, 0.1, delta=0.0)
    assert RiskBudget(FN, 0.1, correction="ucb-union").correction == "ucb_union"


def test_grid_uniform_example():
    ds = Dataset((make_traj([0.0, 0.3, 1.0], [0, 0, 1]),))
    g = build_grid(ds, S, GridMode("uniform", 5))
    assert g.per_signal["s"] == (0.0, 0.25, 0.5, 0.75, 1.0)


def test_grid_constant_signal_collapses():
    ds = Dataset((make_traj([0.4] * 5, [0] * 5),))
    assert build_grid(ds, S, GridMode("uniform", 10)).per_signal["s"] == (0.4,)


def test_grid_quantile_example():
    vals = list(range(1, 101))
    ds = Dataset((make_traj(vals, [0] * 100),))
    g = build_grid(ds, S, GridMode("quantile", 4))
    ref = np.quantile(vals, [0.25, 0.5, 0.75, 1.0])
    assert g.per_signal["s"] == tuple(ref)
    assert g.per_signal["s"] == pytest.approx((25, 50, 75, 100), abs=1)


def test_grid_lower_is_log_span():
    ds = Dataset((make_traj([0.1, 0.2], [0, 0]),))
    g = build_grid(ds, S, GridMode("uniform", 6), side="lower")
    vals = np.array(g.per_signal["s"])
    assert vals[0] == pytest.approx(1e-5) and vals[-1] == pytest.approx(1.0)
    assert np.allclose(np.diff(np.log10(vals)), 1.0)


def test_grid_mode_parse():
    assert GridMode.parse("quantile:20") == GridMode("quantile", 20)
    with pytest.raises(ValueError):
        GridMode.parse("uniform:1")


def _hand_table():
    names = ["a", "a", "a", "b", "b", "b"]
    params = np.array([0.2, 0.5, 0.8, 0.2, 0.5, 0.8])
    dummy = np.zeros((10, 6))
    t = CandidateTable(names, params, dummy, dummy, dummy.astype(int), dummy.astype(np.int8), "upper")
    risk = np.array([0.40, 0.15, 0.05, 0.30, 0.10, 0.20])
    eff = np.array([0.01, 0.20, 0.50, 0.02, 0.12, 0.07])
    return t, risk, eff


def test_six_row_enumeration():
    t, risk, eff = _hand_table()
    out = select_from_table(t, RiskBudget(FP, 0.12, correction="naive"), risk, eff)
    feasible = [k for k in range(6) if risk[k] <= 0.12]
    assert len(feasible) == 2
    out = select_from_table(t, RiskBudget(FP, 0.15, correction="naive"), risk, eff)
    feasible = [k for k in range(6) if risk[k] <= 0.15]
    assert len(feasible) == 3
    best = min(feasible, key=lambda k: eff[k])
    assert out.selected == (t.signals[best], t.params[best]) == ("b", 0.5)
    assert {(r.signal, r.parameter) for r in out.feasible_set} == {
        (t.signals[k], t.params[k]) for k in feasible
    }


def test_epsilon_one_naive_selects_global_argmin():
    t, risk, eff = _hand_table()
    out = select_from_table(t, RiskBudget(FP, 1.0, correction="naive"), risk, eff)
    assert out.selected == ("a", 0.2)
    assert len(out.feasible_set) == 6


def test_epsilon_zero_ucb_is_infeasible(rng):
    ds = random_dataset(rng, 20)
    g = build_grid(ds, S)
    out = calibrate(ds, S, g, RiskBudget(FP, 0.0, correction="ucb"))
    assert out.selected is None and out.adjusted_risk is None and out.efficiency_estimate is None
    assert not out.feasible and out.policy() is None
    assert out.infeasible_reason


def test_tie_breaks():
    dummy = np.zeros((4, 3))
    t = CandidateTable(["b", "a", "a"], np.array([0.5, 0.5, 0.7]), dummy, dummy,
                       dummy.astype(int), dummy.astype(np.int8), "upper")
    same = np.zeros(3)
    # equal efficiency and risk: larger lambda wins, then name
    assert select_from_table(t, RiskBudget(FP, 1.0, correction="naive"), same, same).selected == ("a", 0.7)
    t2 = CandidateTable(["b", "a"], np.array([0.5, 0.5]), dummy[:, :2], dummy[:, :2],
                        dummy[:, :2].astype(int), dummy[:, :2].astype(np.int8), "upper")
    assert select_from_table(t2, RiskBudget(FP, 1.0, correction="naive"), same[:2], same[:2]).selected == ("a", 0.5)
    lower = CandidateTable(["a", "a"], np.array([0.1, 0.01]), dummy[:, :2], dummy[:, :2],
                           dummy[:, :2].astype(int), dummy[:, :2].astype(np.int8), "lower")
    assert select_from_table(lower, RiskBudget(FN, 1.0, correction="naive"), same[:2], same[:2]).selected == ("a", 0.01)


def test_pairing_errors(rng):
    ds = random_dataset(rng, 5)
    g = build_grid(ds, S)
    with pytest.raises(CalibrationError):
        calibrate(ds, S, g, RiskBudget(FP, 0.1), efficiency=LossKind.EFFICIENCY_LOWER)
    with pytest.raises(CalibrationError):
        calibrate(ds, S, g, RiskBudget(FN, 0.1))
    with pytest.raises(CalibrationError):
        calibrate(ds, S, CandidateGrid({}), RiskBudget(FP, 0.1))


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    side=st.sampled_from(["upper", "lower"]),
    correction=st.sampled_from(["naive", "ucb", "ucb_union"]),
)
def test_matches_brute_force(seed, side, correction):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, int(rng.integers(3, 25)), names=("s", "q"))
    specs = [SignalSpec("s"), SignalSpec("q")]
    grid = build_grid(ds, specs, GridMode("quantile", int(rng.integers(2, 12))), side=side)
    eps = float(rng.choice([0.0, 0.05, 0.2, 0.5, 1.0, rng.random()]))
    fixed = float(rng.random()) if side == "lower" and rng.random() < 0.5 else None
    budget = RiskBudget(FP if side == "upper" else FN, eps, 0.1, correction)
    if fixed is not None:
        grid = grid.restrict("s")
        specs = specs[:1]
    got = calibrate(ds, specs, grid, budget, fixed_upper=fixed)
    want, rows = brute_force_calibrate(ds, grid.per_signal, side, eps, correction, 0.1, fixed)
    assert got.selected == want
    assert [(r.signal, r.parameter, r.adjusted_risk, r.efficiency) for r in got.feasible_set] == rows


def test_permutation_invariance(rng):
    ds = random_dataset(rng, 40, names=("s", "q"))
    specs = [SignalSpec("s"), SignalSpec("q")]
    grid = build_grid(ds, specs, GridMode("uniform", 30))
    budget = RiskBudget(FP, 0.4, correction="naive")
    base = calibrate(ds, specs, grid, budget)
    for _ in range(5):
        perm = rng.permutation(len(ds))
        shuffled = Dataset(tuple(ds[i] for i in perm))
        again = calibrate(shuffled, specs, grid, budget)
        assert again.selected == base.selected
        assert again.adjusted_risk == base.adjusted_risk


def test_feasible_sets_grow_with_epsilon(rng):
    ds = random_dataset(rng, 30)
    grid = build_grid(ds, S, GridMode("uniform", 40))
    prev = set()
    for eps in np.linspace(0, 1, 21):
        out = calibrate(ds, S, grid, RiskBudget(FP, float(eps), correction="ucb"))
        cur = {(r.signal, r.parameter) for r in out.feasible_set}
        assert prev <= cur
        prev = cur


def _separated():
    return generate(SynthConfig(population=120, seed=2, solvable={"noise": 0.0},
                                unsolvable={"noise": 0.01, "guess_prob": 0.0}))


def test_dual_upper_stage_failure():
    ds = _separated()
    up = build_grid(ds, S_conf := [SignalSpec("confidence")])
    lo = build_grid(ds, S_conf, side="lower")
    res = calibrate_dual(ds, S_conf[0], (up, lo), 0.0, 0.5, correction="ucb")
    assert res.failed_stage == "upper" and res.lower is None and res.policy is None
    assert len(res.to_dict()["stages"]) == 1


def test_dual_eps_minus_one_takes_cheapest_c():
    ds = _separated()
    spec = SignalSpec("confidence")
    up = build_grid(ds, [spec])
    lo = build_grid(ds, [spec], side="lower")
    res = calibrate_dual(ds, spec, (up, lo), 0.2, 1.0, correction="naive")
    assert res.failed_stage is None
    effs = [r.efficiency for r in res.lower.feasible_set]
    assert len(effs) == lo.size
    assert res.lower.efficiency_estimate == min(effs)


def test_dual_well_separated_meets_both_budgets():
    ds = _separated()
    spec = SignalSpec("confidence")
    up = build_grid(ds, [spec])
    lo = build_grid(ds, [spec], side="lower")
    res = calibrate_dual(ds, spec, (up, lo), 0.1, 0.1, delta=0.1, correction="ucb")
    pol = res.policy
    assert pol is not None
    assert pol.lower.cap == pol.upper.lambda_plus
    assert empirical_risk(ds, pol, FN) <= 0.1
    assert empirical_risk(ds, pol.upper, FP) <= 0.1
    d = res.to_dict()
    assert [s["side"] for s in d["stages"]] == ["upper", "lower"]
