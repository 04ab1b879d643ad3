import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from cpaudit.audit import (AuditError, calibration_curve, clopper_pearson, collapse_membership,
                           coverage_report, default_targets, efficiency_curve, set_size_coverage,
                           superclass_collapse)
from cpaudit.conformal import PredictionSet, ScoreConfig, membership_to_sets
from cpaudit.core import LabeledDataset, SplitSpec, split_dataset
from cpaudit.synth import GroupSpec, generate, ham_like


@pytest.fixture(scope="module")
def ham():
    site = GroupSpec("site", ("a", "b"), (0.7, 0.3), (1.0, 1.0))
    ds = generate(ham_like(n=3000, seed=11, concentration=2.0, group_specs=(site,)))
    return split_dataset(ds, SplitSpec(500, seed=11))


def test_clopper_pearson_edges():
    assert clopper_pearson(0, 10)[0] == 0.0
    assert clopper_pearson(10, 10)[1] == 1.0
    lo, hi = clopper_pearson(50, 100)
    assert lo == pytest.approx(stats.binomtest(50, 100).proportion_ci(method="exact").low)
    assert hi == pytest.approx(stats.binomtest(50, 100).proportion_ci(method="exact").high)
    with pytest.raises(AuditError):
        clopper_pearson(3, 2)


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 500), data=st.data())
def test_clopper_pearson_contains_rate(n, data):
    x = data.draw(st.integers(0, n))
    lo, hi = clopper_pearson(x, n)
    assert 0 <= lo <= x / n <= hi <= 1


def test_full_sets_cover_everything(ham):
    _, ev = ham
    rep = coverage_report(np.ones((len(ev), ev.k), bool), ev)
    assert rep.marginal.rate == 1.0
    assert rep.efficiency.frac_full == 1.0
    assert set_size_coverage(np.ones((len(ev), ev.k), bool), ev) == {ev.k: 1.0}


def test_argmax_sets_give_accuracy(ham):
    _, ev = ham
    member = np.zeros((len(ev), ev.k), bool)
    member[np.arange(len(ev)), ev.probs.argmax(1)] = True
    rep = coverage_report(membership_to_sets(member, ev.ids), ev)
    assert rep.marginal.rate == pytest.approx(ev.accuracy())
    assert list(rep.per_set_size) == [1]


def test_weighted_average_identities(ham):
    _, ev = ham
    rng = np.random.default_rng(0)
    member = rng.random((len(ev), ev.k)) < 0.4
    rep = coverage_report(member, ev)
    for table in (rep.per_class, rep.per_set_size):
        total = sum(s.n * s.rate for s in table.values())
        assert total / len(ev) == pytest.approx(rep.marginal.rate, abs=1e-12)
    assert sum(s.n for s in rep.per_group.values()) == len(ev)
    # empty set-size strata are left out
    assert all(s.n > 0 for s in rep.per_set_size.values())


def test_misaligned_sets_rejected(ham):
    _, ev = ham
    sets = [PredictionSet(members=(0,), record_id="nope")] + [PredictionSet((0,))] * (len(ev) - 1)
    with pytest.raises(AuditError):
        coverage_report(sets, ev)
    with pytest.raises(AuditError):
        coverage_report(sets[:-1], ev)


def test_report_rows_and_files(ham, tmp_path):
    _, ev = ham
    rep = coverage_report(np.ones((len(ev), ev.k), bool), ev, alpha=0.1)
    rep.write(tmp_path / "r.json", tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("stratification,stratum,rate")
    assert len(lines) == 1 + len(rep.rows())


def test_curve_monotone(ham):
    cal, ev = ham
    pts = calibration_curve(cal, ev, [0.5, 0.1, 0.01], ScoreConfig()).points
    assert [p.target for p in pts] == pytest.approx([0.5, 0.9, 0.99])
    cov = [p.empirical for p in pts]
    assert cov == sorted(cov)


def test_curve_below_accuracy_floor(ham):
    cal, ev = ham
    target = ev.accuracy() - 0.2
    p = calibration_curve(cal, ev, [1 - target], ScoreConfig()).points[0]
    assert p.mean_size < 1.2
    assert p.empirical >= ev.accuracy() - 0.01


def _mean_deviation(concentration, alphas, n_cal=300, splits=50):
    devs = []
    for s in range(splits):
        ds = generate(ham_like(n=n_cal + 2000, seed=100 + s, concentration=concentration))
        cal, ev = split_dataset(ds, SplitSpec(n_cal, s))
        devs.append([p.empirical - p.target for p in calibration_curve(cal, ev, alphas, ScoreConfig()).points])
    targets = np.sort(1 - np.array(alphas))
    return np.mean(devs, axis=0), 2 * np.sqrt(targets * (1 - targets) / 2000) + 1 / (n_cal + 1)


ALPHAS = [0.5, 0.4, 0.3, 0.2, 0.1, 0.05]


def test_curve_validity_band():
    # weak model: the argmax rule rarely fires, so coverage tracks the target from both sides
    dev, band = _mean_deviation(1.0, ALPHAS)
    assert np.all(np.abs(dev) <= band)


def test_curve_never_undercovers():
    # sharper model: forced singletons over-cover near its accuracy, never under-cover
    dev, band = _mean_deviation(2.0, ALPHAS)
    assert np.all(dev >= -band)
    assert dev[0] > band[0]


def test_superclass_examples():
    tax = {5: 0, 2: 0, 4: 1}
    sets = [PredictionSet((2, 5)), PredictionSet((4, 5))]
    collapsed, info = superclass_collapse(sets, tax)
    assert collapsed == [(0,), (0, 1)]
    assert info == 0.5
    with pytest.raises(AuditError):
        superclass_collapse([PredictionSet((0,))], tax)


@settings(max_examples=50, deadline=None)
@given(member=st.lists(st.lists(st.booleans(), min_size=5, max_size=5), min_size=1, max_size=20),
       sup=st.lists(st.integers(0, 2), min_size=5, max_size=5))
def test_collapse_idempotent(member, sup):
    member = np.array(member)
    tax = dict(enumerate(sup))
    once = collapse_membership(member, tax)
    ident = {s: s for s in range(once.shape[1])}
    assert np.array_equal(collapse_membership(once, ident), once)
    # a collapsed set is never larger than the original
    assert np.all(once.sum(1) <= member.sum(1))


def test_efficiency_monotone(ham):
    cal, ev = ham
    pts = efficiency_curve(cal, ev, 1 - default_targets(ev.accuracy()), ScoreConfig())
    single = [p.frac_singleton for p in pts]
    info = [p.informativeness for p in pts]
    assert single == sorted(single, reverse=True)
    assert info == sorted(info, reverse=True)
    assert pts[0].target == pytest.approx(ev.accuracy(), abs=1e-9)
    assert pts[-1].target == pytest.approx(0.999)


def test_efficiency_saturation(ham):
    # near-certain coverage: only sets rescued by the argmax rule stay singletons
    cal, ev = ham
    p = efficiency_curve(cal, ev, [0.0005], ScoreConfig())[0]
    assert p.frac_singleton < 0.05
    assert p.mean_size > ev.k - 1.5


def test_binary_sizes():
    ds = LabeledDataset(probs=np.random.default_rng(0).dirichlet([1, 1], 400),
                        labels=np.arange(400) % 2)
    cal, ev = split_dataset(ds, SplitSpec(100, 0))
    for p in efficiency_curve(cal, ev, [0.5, 0.2, 0.05], ScoreConfig()):
        assert 1 <= p.mean_size <= 2


def test_bad_alpha_grid(ham):
    cal, ev = ham
    with pytest.raises(AuditError):
        calibration_curve(cal, ev, [], ScoreConfig())
    with pytest.raises(AuditError):
        calibration_curve(cal, ev, [1.0], ScoreConfig())
