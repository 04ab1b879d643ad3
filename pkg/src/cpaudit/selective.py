"""Selective classification with high-probability accuracy guarantees.

A confidence threshold ``lam`` keeps the records whose top probability is at
least ``lam`` and predicts their argmax.  Two different uses of the lower
confidence bound live here and should not be confused:

* :func:`selective_curve` reports a *pointwise* bound at every threshold.  It
  describes the accuracy/rejection trade-off but no single point on it is
  certified once a threshold has been picked by looking at the curve.
* :func:`choose_lambda` runs a fixed-sequence test down the threshold grid, so
  the returned threshold's accuracy guarantee holds with probability
  ``1 - delta`` without any multiplicity correction.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy import stats

from .conformal import ScoreConfig, calibrate_dataset, dataset_membership
from .core import LabeledDataset, SplitSpec, split_dataset

HOEFFDING, CLOPPER_PEARSON = "hoeffding", "clopper-pearson"


class SelectiveError(ValueError):
    pass


def hoeffding_lcb(correct: int, n: int, delta: float) -> float:
    """``max(0, correct/n - sqrt(ln(1/delta) / (2n)))``."""
    if n < 1:
        raise SelectiveError("lower bound needs n >= 1")
    if not 0 <= correct <= n:
        raise SelectiveError(f"need 0 <= correct <= n, got {correct}/{n}")
    if not 0 < delta <= 1:
        raise SelectiveError(f"delta must lie in (0, 1], got {delta}")
    return max(0.0, correct / n - math.sqrt(math.log(1.0 / delta) / (2.0 * n)))


def clopper_pearson_lcb(correct: int, n: int, delta: float) -> float:
    """One-sided exact binomial lower bound at level ``1 - delta``, capped at ``correct/n``.

    The cap only binds for ``delta > 0.5``, where the exact quantile can
    exceed the observed rate.
    """
    if n < 1:
        raise SelectiveError("lower bound needs n >= 1")
    if not 0 <= correct <= n:
        raise SelectiveError(f"need 0 <= correct <= n, got {correct}/{n}")
    if not 0 < delta <= 1:
        raise SelectiveError(f"delta must lie in (0, 1], got {delta}")
    if correct == 0:
        return 0.0
    return min(float(stats.beta.ppf(delta, correct, n - correct + 1)), correct / n)


_BOUNDS = {HOEFFDING: hoeffding_lcb, CLOPPER_PEARSON: clopper_pearson_lcb}


@dataclass(frozen=True)
class SelectiveConfig:
    delta: float = 0.1
    target_accuracy: float | None = None
    grid: tuple[float, ...] | None = None
    bound: str = HOEFFDING

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise SelectiveError(f"delta must lie in (0, 1), got {self.delta}")
        if self.bound not in _BOUNDS:
            raise SelectiveError(f"unknown bound {self.bound!r}; use {sorted(_BOUNDS)}")
        if self.grid is not None:
            g = tuple(float(x) for x in self.grid)
            if not g:
                raise SelectiveError("threshold grid is empty")
            if any(not 0.0 <= x <= 1.0 for x in g):
                raise SelectiveError("thresholds must lie in [0, 1]")
            if any(a < b for a, b in zip(g, g[1:])):
                raise SelectiveError("threshold grid must be sorted in descending order")
            object.__setattr__(self, "grid", g)

    def lcb(self, correct: int, n: int, delta: float | None = None) -> float:
        if n == 0:
            return 0.0
        return _BOUNDS[self.bound](correct, n, self.delta if delta is None else delta)


def default_grid(ds: LabeledDataset, num: int = 101) -> tuple[float, ...]:
    """Thresholds at evenly spaced empirical quantiles of the top-probability values, descending."""
    conf = ds.probs.max(axis=1)
    qs = np.quantile(conf, np.linspace(0.0, 1.0, num), method="lower")
    return tuple(float(x) for x in np.unique(qs)[::-1])


@dataclass(frozen=True)
class CurvePoint:
    lam: float
    rejection_fraction: float
    n_kept: int
    empirical_accuracy: float
    lower_bound: float


@dataclass(frozen=True)
class SelectiveCurve:
    points: list[CurvePoint]
    delta: float

    def rows(self) -> list[dict]:
        return [{"lambda": p.lam, "rejection": p.rejection_fraction, "n_kept": p.n_kept,
                 "acc": p.empirical_accuracy, "lcb": p.lower_bound} for p in self.points]


class _Kept:
    """Counts of kept and correct records for any confidence threshold, via one sort."""

    def __init__(self, ds: LabeledDataset):
        conf = ds.probs.max(axis=1)
        correct = np.argmax(ds.probs, axis=1) == ds.labels
        order = np.argsort(-conf, kind="stable")
        self.conf_desc = conf[order]
        self.cum_correct = np.concatenate([[0], np.cumsum(correct[order])])
        self.n = len(ds)

    def __call__(self, lam: float) -> tuple[int, int]:
        # number of confidences >= lam in a descending array
        n_kept = int(np.searchsorted(-self.conf_desc, -lam, side="right"))
        return n_kept, int(self.cum_correct[n_kept])


def selective_curve(ds: LabeledDataset, cfg: SelectiveConfig) -> SelectiveCurve:
    """Pointwise accuracy bounds along the threshold grid, ordered by increasing threshold."""
    grid = cfg.grid or default_grid(ds)
    kept = _Kept(ds)
    points = []
    for lam in sorted(grid):
        n_kept, n_correct = kept(lam)
        acc = n_correct / n_kept if n_kept else float("nan")
        points.append(CurvePoint(lam=lam, rejection_fraction=1.0 - n_kept / kept.n, n_kept=n_kept,
                                 empirical_accuracy=acc, lower_bound=cfg.lcb(n_correct, n_kept)))
    return SelectiveCurve(points=points, delta=cfg.delta)


@dataclass(frozen=True)
class LambdaChoice:
    lam: float
    certified_accuracy: float
    lower_bound: float
    n_kept: int
    rejection_fraction: float


def choose_lambda(ds: LabeledDataset, cfg: SelectiveConfig,
                  skip_untestable: bool = True) -> LambdaChoice | None:
    """Smallest threshold certified to reach ``cfg.target_accuracy`` with probability ``1 - delta``.

    Thresholds are tested from the most to the least selective; testing
    stops at the first failure and the last passing threshold is returned.
    ``None`` means even the first threshold could not be certified.

    With ``skip_untestable`` the leading thresholds that keep too few records
    to pass even if every kept prediction were correct are dropped before
    testing.  That decision uses only the confidence values, never the
    labels, so the sequence is still fixed with respect to the tested
    outcomes.
    """
    if cfg.target_accuracy is None:
        raise SelectiveError("choose_lambda needs target_accuracy")
    grid = cfg.grid or default_grid(ds)
    kept = _Kept(ds)
    if skip_untestable:
        start = 0
        while start < len(grid):
            n_kept = kept(grid[start])[0]
            if n_kept and cfg.lcb(n_kept, n_kept) >= cfg.target_accuracy:
                break
            start += 1
        grid = grid[start:]
    choice = None
    for lam in grid:
        n_kept, n_correct = kept(lam)
        bound = cfg.lcb(n_correct, n_kept)
        if bound < cfg.target_accuracy:
            break
        choice = LambdaChoice(lam=lam, certified_accuracy=cfg.target_accuracy, lower_bound=bound,
                              n_kept=n_kept, rejection_fraction=1.0 - n_kept / kept.n)
    return choice


@dataclass(frozen=True)
class MisuseRow:
    target: float
    marginal_coverage: float
    singleton_fraction: float
    singleton_accuracy: float
    matched_lambda: float
    matched_accuracy: float
    matched_lower_bound: float


@dataclass(frozen=True)
class MisuseReport:
    rows: list[MisuseRow]
    delta: float
    singleton_accuracy_monotone: bool

    def to_dict(self) -> dict:
        return {"delta": self.delta, "singleton_accuracy_monotone": self.singleton_accuracy_monotone,
                "rows": [asdict(r) for r in self.rows]}


def size_one_misuse_demo(ds: LabeledDataset, cfg: ScoreConfig, alphas: Sequence[float] | None = None,
                         delta: float = 0.1, calibration_fraction: float = 0.5) -> MisuseReport:
    """Compare "keep the singleton CP sets" with confidence thresholding at the same rejection rate.

    For each alpha the data (split with ``cfg.seed``) are calibrated, the
    fraction and accuracy of singleton sets on the evaluation half are
    recorded, and the same number of most-confident evaluation records are
    scored as a selective classifier with a pointwise lower bound.
    """
    if alphas is None:
        alphas = np.round(np.linspace(0.5, 0.01, 25), 6)
    n_cal = min(max(1, int(round(len(ds) * calibration_fraction))), len(ds) - 1)
    cal, ev = split_dataset(ds, SplitSpec(n_cal, cfg.seed))
    top = np.argmax(ev.probs, axis=1)
    correct = top == ev.labels
    conf = ev.probs.max(axis=1)
    order = np.argsort(-conf, kind="stable")
    cum_correct = np.concatenate([[0], np.cumsum(correct[order])])
    sel = SelectiveConfig(delta=delta)
    rows = []
    for alpha in sorted(set(float(a) for a in alphas), reverse=True):
        scfg = ScoreConfig(alpha=alpha, randomized=cfg.randomized, seed=cfg.seed)
        member = dataset_membership(ev, calibrate_dataset(cal, scfg), scfg)
        sizes = member.sum(axis=1)
        single = sizes == 1
        m = int(single.sum())
        rows.append(MisuseRow(
            target=1.0 - alpha,
            marginal_coverage=float(member[np.arange(len(ev)), ev.labels].mean()),
            singleton_fraction=m / len(ev),
            singleton_accuracy=float(correct[single].mean()) if m else float("nan"),
            matched_lambda=float(conf[order[m - 1]]) if m else 1.0,
            matched_accuracy=cum_correct[m] / m if m else float("nan"),
            matched_lower_bound=sel.lcb(int(cum_correct[m]), m),
        ))
    accs = [r.singleton_accuracy for r in rows if not math.isnan(r.singleton_accuracy)]
    monotone = all(a <= b for a, b in zip(accs, accs[1:])) or all(a >= b for a, b in zip(accs, accs[1:]))
    return MisuseReport(rows=rows, delta=delta, singleton_accuracy_monotone=monotone)
