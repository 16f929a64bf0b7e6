import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fanlab.errors import ContractError, DataError
from fanlab.landmarks import BoundingBox, LandmarkSet
from fanlab.metrics import (AUC_THRESHOLD, CED_STEP, EvalResult, auc, auc_from_results, balanced_subset,
                            ced_curve, failure_rate, nme, yaw_bin)

from .oracles import step_curve_auc


def _results(values, yaws=None):
    yaws = yaws if yaws is not None else [None] * len(values)
    return [EvalResult(float(v), f"s{i}", y) for i, (v, y) in enumerate(zip(values, yaws))]


def test_nme_hand_example():
    gt = LandmarkSet([[0, 0], [1, 1]])
    pred = LandmarkSet([[3, 4], [1, 1]])
    assert abs(nme(gt, pred, BoundingBox(0, 0, 8, 2)) - 0.625) <= 1e-12
    assert nme(gt, gt, BoundingBox(0, 0, 8, 2)) == 0.0


def test_nme_errors():
    gt = LandmarkSet([[0, 0], [1, 1]])
    with pytest.raises(ContractError):
        nme(gt, LandmarkSet([[0, 0]]), BoundingBox(0, 0, 1, 1))
    with pytest.raises(ContractError):
        nme(gt, gt, BoundingBox(0, 0, 0, 5))


def test_nme_skips_invisible_pairs():
    gt = LandmarkSet([[0, 0], [1, 1], [5, 5]], visible=[True, True, False])
    pred = LandmarkSet([[3, 4], [1, 1], [0, 0]], visible=[True, True, True])
    assert nme(gt, pred, BoundingBox(0, 0, 8, 2)) == pytest.approx(0.625, abs=1e-12)


def test_nme_ignores_depth():
    gt = LandmarkSet([[0, 0, 5], [1, 1, -3]])
    pred = LandmarkSet([[3, 4, 0], [1, 1, 0]])
    assert nme(gt, pred, BoundingBox(0, 0, 8, 2)) == pytest.approx(0.625, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3))
def test_nme_homogeneity(seed, s):
    rng = np.random.default_rng(seed)
    gt, pred = rng.uniform(0, 100, (2, 68, 2))
    box = BoundingBox(*rng.uniform(0, 10, 2), *rng.uniform(10, 90, 2))
    a = nme(LandmarkSet(gt), LandmarkSet(pred), box)
    b = nme(LandmarkSet(gt * s), LandmarkSet(pred * s), box.scaled(s))
    assert b == pytest.approx(a, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_nme_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    gt, pred = rng.uniform(0, 100, (2, 68, 2))
    box = BoundingBox(0, 0, 64, 64)
    perm = rng.permutation(68)
    a = nme(LandmarkSet(gt), LandmarkSet(pred), box)
    b = nme(LandmarkSet(gt[perm]), LandmarkSet(pred[perm]), box)
    # exact up to summation order
    assert b == pytest.approx(a, rel=1e-15, abs=0)


def test_ced_counting():
    assert np.all(ced_curve(_results([0, 0, 0])).fractions == 1)
    c = ced_curve(_results([0.01, 0.03]))
    assert c.at(0.02) == 0.5
    assert np.all(np.diff(c.fractions) >= 0)
    with pytest.raises(ContractError):
        ced_curve([])


def test_ced_matches_brute_force(rng):
    errs = rng.uniform(0, 0.12, 200)
    c = ced_curve(_results(errs))
    for t, f in zip(c.thresholds[::37], c.fractions[::37]):
        assert f == sum(1 for e in errs if e <= t) / len(errs)


def test_auc_cases():
    assert auc_from_results(_results([0, 0])) == pytest.approx(1.0)
    assert auc_from_results(_results([0.07, 0.2])) == 0.0
    assert auc_from_results(_results([0.0, 0.5])) == pytest.approx(0.5, abs=CED_STEP / AUC_THRESHOLD)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 0.12), min_size=1, max_size=60))
def test_auc_within_one_grid_step_of_step_curve(errs):
    got = auc_from_results(_results(errs))
    assert abs(got - step_curve_auc(errs, AUC_THRESHOLD)) <= CED_STEP / AUC_THRESHOLD


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 0.12), min_size=1, max_size=30), st.floats(0.0701, 1.0))
def test_auc_monotonicity(errs, bad):
    base = auc_from_results(_results(errs))
    assert auc_from_results(_results(errs + [0.0])) >= base
    assert auc_from_results(_results(errs + [bad])) <= base


def test_failure_rate_examples():
    assert failure_rate(_results([0.01, 0.02])) == 0
    assert failure_rate(_results([0.01, 0.02, 0.03, 0.08])) == 0.25
    assert failure_rate(_results([0.07])) == 0  # strictly greater
    assert 18 / 7200 == 0.0025


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 0.2).filter(lambda v: v != AUC_THRESHOLD), min_size=1, max_size=50))
def test_failure_rate_complements_curve(errs):
    res = _results(errs)
    assert failure_rate(res) + ced_curve(res).at(AUC_THRESHOLD) == 1.0


def test_eval_result_rejects_bad_values():
    with pytest.raises(ContractError):
        EvalResult(-0.1)
    with pytest.raises(ContractError):
        EvalResult(float("nan"))


def test_yaw_bins():
    assert [yaw_bin(y) for y in (0, -29.9, 30, 59.99, -60, 90)] == [0, 0, 1, 1, 2, 2]
    with pytest.raises(DataError):
        yaw_bin(91)


def test_balanced_subset():
    rng = np.random.default_rng(0)
    yaws = rng.uniform(-90, 90, 900)
    items = _results(np.zeros(900), yaws)
    sub = balanced_subset(items, 100, seed=3)
    counts = np.bincount([yaw_bin(r.yaw) for r in sub], minlength=3)
    assert counts.tolist() == [100, 100, 100]
    assert sub == balanced_subset(items, 100, seed=3)
    one = _results([0, 0, 0], [5.0, 45.0, 75.0])
    assert balanced_subset(one, 1) == one
    with pytest.raises(DataError, match=r"\[60,90\]"):
        balanced_subset(_results([0, 0], [5.0, 45.0]), 1)
