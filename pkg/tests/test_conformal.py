import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpaudit.conformal import (CalibrationError, CalibrationResult, ScoreConfig, aps_score,
                               aps_score_matrix, calibrate, calibrate_dataset, dataset_membership,
                               load_sets, mondrian_calibrate, predict_set, predict_sets, save_sets,
                               weighted_calibrate)
from cpaudit.core import LabeledDataset
from cpaudit.synth import generate, ham_like


# levels within TOL of a rank boundary count as reaching it (float noise in 1 - alpha)
TOL = Fraction(1, 10**12)


def oracle_tau(scores, alpha):
    """Sort, then index at ceil((n+1)(1-alpha)), in exact rational arithmetic."""
    n = len(scores)
    rank = math.ceil((n + 1) * (1 - Fraction(alpha) - TOL))
    return 1.0 if rank > n else sorted(scores)[rank - 1]


def oracle_weighted_tau(scores, weights, alpha):
    w = [Fraction(x) for x in weights]
    total = sum(w) + max(w)
    target = 1 - Fraction(alpha) - TOL
    for t in sorted(set(scores)):
        if sum(wi for s, wi in zip(scores, w) if s <= t) / total >= target:
            return t
    return 1.0


probs_st = st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8).map(
    lambda v: (np.array(v) / np.sum(v)).tolist())


# ---- scores

def test_aps_examples():
    assert aps_score([0.6, 0.3, 0.1], 1) == pytest.approx(0.9)
    assert aps_score([0.0, 1.0, 0.0], 1) == pytest.approx(1.0)
    assert aps_score([0.6, 0.3, 0.1], 0, u=0.5) == pytest.approx(0.3)


def test_aps_ties_break_to_lower_index():
    assert aps_score([0.4, 0.4, 0.2], 0) == pytest.approx(0.4)
    assert aps_score([0.4, 0.4, 0.2], 1) == pytest.approx(0.8)


@settings(max_examples=100, deadline=None)
@given(p=probs_st, u=st.floats(0, 1))
def test_aps_score_bounds(p, u):
    det = aps_score_matrix(np.array([p]))[0]
    rnd = aps_score_matrix(np.array([p]), np.array([u]))[0]
    assert np.all((det >= 0) & (det <= 1 + 1e-12))
    assert np.all(rnd <= det + 1e-12) and np.all(rnd >= -1e-12)
    # the top class scores its own mass, the bottom class scores everything
    assert det[np.argmax(p)] == pytest.approx(max(p))
    assert det.max() == pytest.approx(1.0)


# ---- calibration

def test_calibrate_examples():
    assert calibrate([0.1, 0.2, 0.3, 0.4], 0.5).tau == 0.3
    assert calibrate([0.1, 0.2, 0.3, 0.4], 0.1).tau == 1.0
    assert calibrate([0.7], 0.6).tau == 0.7


@pytest.mark.parametrize("alpha", [0, 1, -0.1, 1.5])
def test_calibrate_rejects_alpha(alpha):
    with pytest.raises(CalibrationError):
        calibrate([0.1, 0.2], alpha)


def test_calibrate_rejects_empty():
    with pytest.raises(CalibrationError):
        calibrate([], 0.1)


@settings(max_examples=300, deadline=None)
@given(scores=st.lists(st.floats(0, 1), min_size=1, max_size=500),
       alpha=st.floats(0.001, 0.999))
def test_calibrate_matches_oracle(scores, alpha):
    assert calibrate(scores, alpha).tau == oracle_tau(scores, alpha)


@pytest.mark.parametrize("alpha", [0.01, 0.05, 0.1, 0.2, 0.25, 0.3, 0.5, 0.7, 0.9])
@pytest.mark.parametrize("n", [1, 4, 9, 19, 99, 100, 499])
def test_calibrate_oracle_on_decimal_alphas(alpha, n):
    scores = np.random.default_rng(n).random(n).tolist()
    assert calibrate(scores, alpha).tau == oracle_tau(scores, alpha)


def test_weighted_examples():
    assert weighted_calibrate([0.1, 0.2, 0.3, 0.4], [1, 1, 1, 1], 0.5).tau == 0.3
    assert weighted_calibrate([0.7], [3.5], 0.6).tau == 0.7


def test_weighted_shifts_toward_heavy_class():
    rng = np.random.default_rng(0)
    low, high = rng.uniform(0, 0.5, 200), rng.uniform(0.5, 1, 200)
    scores = np.concatenate([low, high])
    base = weighted_calibrate(scores, np.ones(400), 0.3).tau
    heavy = weighted_calibrate(scores, np.r_[np.ones(200), 2 * np.ones(200)], 0.3).tau
    light = weighted_calibrate(scores, np.r_[2 * np.ones(200), np.ones(200)], 0.3).tau
    assert light < base < heavy


@settings(max_examples=200, deadline=None)
@given(data=st.data(), n=st.integers(1, 60), alpha=st.floats(0.01, 0.99))
def test_weighted_matches_oracle(data, n, alpha):
    scores = data.draw(st.lists(st.sampled_from([i / 20 for i in range(21)]), min_size=n, max_size=n))
    weights = data.draw(st.lists(st.integers(1, 5), min_size=n, max_size=n))
    assert weighted_calibrate(scores, weights, alpha).tau == oracle_weighted_tau(scores, weights, alpha)


@settings(max_examples=100, deadline=None)
@given(scores=st.lists(st.floats(0, 1), min_size=1, max_size=200), alpha=st.floats(0.001, 0.999),
       w=st.floats(0.1, 10))
def test_weighted_equal_weights_reduce_to_plain(scores, alpha, w):
    assert weighted_calibrate(scores, [w] * len(scores), alpha).tau == calibrate(scores, alpha).tau


def test_weighted_rejects_bad_weights():
    with pytest.raises(CalibrationError):
        weighted_calibrate([0.1, 0.2], [1, 0], 0.1)
    with pytest.raises(CalibrationError):
        weighted_calibrate([0.1, 0.2], [1], 0.1)


# ---- Mondrian

def _two_class(n=200):
    # class 0 records are confidently right, class 1 records are not
    rng = np.random.default_rng(1)
    p0 = rng.uniform(0.8, 0.95, n)
    probs = np.c_[p0, 1 - p0]
    labels = np.r_[np.zeros(n // 2, int), np.ones(n - n // 2, int)]
    return LabeledDataset(probs=probs, labels=labels, groups={"site": np.array(["A"] * n, dtype=object)})


def test_mondrian_per_class_thresholds():
    ds = _two_class()
    cfg = ScoreConfig(alpha=0.2)
    res = mondrian_calibrate(ds, "class", cfg)
    scores = aps_score_matrix(ds.probs)[np.arange(len(ds)), ds.labels]
    for c in (0, 1):
        cell = scores[ds.labels == c].tolist()
        assert res.partition_thresholds[c] == (oracle_tau(cell, 0.2), len(cell))
    assert res.partition_thresholds[0][0] < 0.96 <= res.partition_thresholds[1][0]


def test_single_cell_partition_is_plain():
    ds = _two_class()
    cfg = ScoreConfig(alpha=0.1)
    assert mondrian_calibrate(ds, "group:site", cfg).partition_thresholds["A"][0] == \
        calibrate_dataset(ds, cfg).tau
    a = dataset_membership(ds, mondrian_calibrate(ds, "group:site", cfg), cfg)
    b = dataset_membership(ds, calibrate_dataset(ds, cfg), cfg)
    assert np.array_equal(a, b)


def test_empty_cell_is_named():
    ds = LabeledDataset(probs=[[0.6, 0.3, 0.1]] * 3, labels=[0, 1, 0])
    with pytest.raises(CalibrationError, match="class=2"):
        mondrian_calibrate(ds, "class", ScoreConfig())
    with pytest.raises(CalibrationError, match="'B'"):
        mondrian_calibrate(_two_class(), "group:site", ScoreConfig(), expected_keys=["B"])


def test_unknown_partition():
    with pytest.raises(CalibrationError):
        calibrate_dataset(_two_class(), ScoreConfig(), partition="feature")


# ---- prediction sets

def _fixed(tau):
    return CalibrationResult(tau=tau, n_cal=10, alpha=0.1, variant="plain")


def test_predict_set_examples():
    p = [0.6, 0.3, 0.1]
    assert predict_set(p, _fixed(0.9)).members == (0, 1)
    assert predict_set(p, _fixed(1.0)).members == (0, 1, 2)
    assert predict_set(p, _fixed(0.2)).members == (0,)


@settings(max_examples=100, deadline=None)
@given(p=probs_st, tau=st.floats(0, 1))
def test_sets_are_sorted_prefixes(p, tau):
    members = predict_set(p, _fixed(tau)).members
    order = np.argsort(-np.asarray(p), kind="stable")
    assert len(members) >= 1
    assert sorted(order[:len(members)].tolist()) == list(members)


@settings(max_examples=50, deadline=None)
@given(scores=st.lists(st.floats(0, 1), min_size=5, max_size=100),
       a1=st.floats(0.01, 0.98), gap=st.floats(0.001, 0.5), p=probs_st)
def test_monotone_in_alpha(scores, a1, gap, p):
    a2 = min(a1 + gap, 0.99)
    t1, t2 = calibrate(scores, a1).tau, calibrate(scores, a2).tau
    assert t1 >= t2
    assert set(predict_set(p, _fixed(t1)).members) >= set(predict_set(p, _fixed(t2)).members)


def test_marginal_coverage_is_valid():
    # exchangeable data: coverage averaged over resamplings sits at or above 1 - alpha
    cov = []
    for s in range(40):
        ds = generate(ham_like(n=1200, seed=s, concentration=2.0))
        cal, ev = ds.subset(np.arange(200)), ds.subset(np.arange(200, 1200))
        m = dataset_membership(ev, calibrate_dataset(cal, ScoreConfig(alpha=0.2)))
        cov.append(m[np.arange(len(ev)), ev.labels].mean())
    se = np.std(cov, ddof=1) / np.sqrt(len(cov))
    assert 0.8 - 3 * se <= np.mean(cov) <= 0.8 + 1 / 201 + 3 * se


def test_randomized_sets_are_reproducible_and_smaller():
    ds = generate(ham_like(n=1500, seed=3, concentration=2.0))
    cal, ev = ds.subset(np.arange(500)), ds.subset(np.arange(500, 1500))
    det = ScoreConfig(alpha=0.1)
    rnd = ScoreConfig(alpha=0.1, randomized=True, seed=7)
    a = dataset_membership(ev, calibrate_dataset(cal, rnd), rnd)
    b = dataset_membership(ev, calibrate_dataset(cal, rnd), rnd)
    assert np.array_equal(a, b)
    d = dataset_membership(ev, calibrate_dataset(cal, det), det)
    assert a.sum(1).mean() <= d.sum(1).mean()


def test_calibration_and_sets_round_trip(tmp_path):
    ds = _two_class()
    res = mondrian_calibrate(ds, "class", ScoreConfig(alpha=0.1))
    res.save(tmp_path / "c.json")
    assert CalibrationResult.load(tmp_path / "c.json") == res
    sets = predict_sets(ds, res)
    save_sets(sets, tmp_path / "s.json")
    assert load_sets(tmp_path / "s.json") == sets
