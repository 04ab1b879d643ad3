import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpaudit.conformal import ScoreConfig
from cpaudit.core import LabeledDataset
from cpaudit.pitfalls import mixed_config
from cpaudit.selective import (SelectiveConfig, SelectiveError, choose_lambda, clopper_pearson_lcb,
                               hoeffding_lcb, selective_curve, size_one_misuse_demo)
from cpaudit.synth import generate


@pytest.fixture(scope="module")
def mixed():
    return generate(mixed_config(9, n=3000))


def test_hoeffding_examples():
    assert hoeffding_lcb(90, 100, 0.05) == pytest.approx(0.7776, abs=1e-4)
    assert hoeffding_lcb(90, 100, 0.05) == pytest.approx(0.9 - math.sqrt(math.log(20) / 200))
    assert hoeffding_lcb(90, 100, 1.0) == pytest.approx(0.9)
    assert hoeffding_lcb(0, 100, 0.05) == 0.0
    with pytest.raises(SelectiveError):
        hoeffding_lcb(1, 0, 0.1)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 2000), frac=st.floats(0, 1), delta=st.floats(0.001, 0.999))
def test_bounds_below_rate(n, frac, delta):
    k = int(round(frac * n))
    assert 0 <= hoeffding_lcb(k, n, delta) <= k / n
    assert 0 <= clopper_pearson_lcb(k, n, delta) <= k / n


def test_clopper_pearson_tighter_at_extremes():
    assert clopper_pearson_lcb(100, 100, 0.05) > hoeffding_lcb(100, 100, 0.05)


def test_curve_at_zero_keeps_everything(mixed):
    p = selective_curve(mixed, SelectiveConfig(grid=(0.5, 0.0))).points[0]
    assert p.lam == 0.0
    assert p.rejection_fraction == 0.0
    assert p.empirical_accuracy == pytest.approx(mixed.accuracy())


def test_one_hot_closed_form():
    n = 1000
    labels = np.arange(n) % 5
    probs = np.eye(5)[labels]
    conf = np.linspace(1.0, 0.3, 11)
    for p in selective_curve(LabeledDataset(probs=probs, labels=labels), SelectiveConfig(delta=0.05,
                             grid=tuple(conf))).points:
        assert p.n_kept == n
        assert p.lower_bound == pytest.approx(1 - math.sqrt(math.log(20) / (2 * n)))


def test_bound_below_accuracy_everywhere(mixed):
    for bound in ("hoeffding", "clopper-pearson"):
        for p in selective_curve(mixed, SelectiveConfig(bound=bound)).points:
            if p.n_kept:
                assert p.lower_bound <= p.empirical_accuracy


def test_bound_rises_then_collapses(mixed):
    pts = selective_curve(mixed, SelectiveConfig(delta=0.05)).points
    bounds = [p.lower_bound for p in pts]
    peak = int(np.argmax(bounds))
    assert bounds[peak] > bounds[0] + 0.1
    assert pts[-1].n_kept <= 2 and bounds[-1] == 0.0


def test_choose_lambda_edges(mixed):
    easy = SelectiveConfig(delta=0.1, target_accuracy=0.3, grid=(0.9, 0.5, 0.0))
    assert choose_lambda(mixed, easy).lam == 0.0
    assert choose_lambda(mixed, SelectiveConfig(delta=0.1, target_accuracy=1.0)) is None
    with pytest.raises(SelectiveError):
        choose_lambda(mixed, SelectiveConfig())


def test_choose_lambda_certificate_holds_on_data(mixed):
    c = choose_lambda(mixed, SelectiveConfig(delta=0.1, target_accuracy=0.9))
    assert c is not None and c.lower_bound >= 0.9
    kept = mixed.probs.max(1) >= c.lam
    assert kept.sum() == c.n_kept


def test_choose_lambda_validity_small():
    # the full 1000-trial check lives in the acceptance suite
    ref = generate(mixed_config(10**6, n=200000))
    conf, correct = ref.probs.max(1), ref.probs.argmax(1) == ref.labels
    bad = 0
    trials = 200
    for s in range(trials):
        c = choose_lambda(generate(mixed_config(s, n=1000)), SelectiveConfig(delta=0.2, target_accuracy=0.9))
        if c is not None and correct[conf >= c.lam].mean() < 0.9:
            bad += 1
    assert bad / trials <= 0.2 + 3 * math.sqrt(0.2 * 0.8 / trials)


@pytest.mark.parametrize("kw", [{"delta": 0}, {"delta": 1}, {"bound": "bonferroni"},
                                {"grid": (0.1, 0.5)}, {"grid": ()}, {"grid": (1.5,)}])
def test_config_validation(kw):
    with pytest.raises(SelectiveError):
        SelectiveConfig(**kw)


def test_misuse_report(mixed):
    rep = size_one_misuse_demo(mixed, ScoreConfig(), alphas=[0.3, 0.1, 0.001])
    rows = {round(r.target, 3): r for r in rep.rows}
    assert rows[0.999].singleton_fraction < 0.05
    r = rows[0.9]
    assert r.singleton_accuracy > r.marginal_coverage
    assert r.matched_lower_bound <= r.matched_accuracy
