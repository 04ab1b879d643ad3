"""Stratified coverage and efficiency measurements for prediction sets."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from .conformal import (
    PredictionSet,
    ScoreConfig,
    aps_score_matrix,
    calibrate,
    draw_u,
    label_scores,
    sets_to_membership,
    PREDICT_STREAM,
)
from .core import LabeledDataset


class AuditError(ValueError):
    pass


def clopper_pearson(covered: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact two-sided binomial interval for ``covered`` successes out of ``n``."""
    if n <= 0:
        raise AuditError("interval needs n >= 1")
    if not 0 <= covered <= n:
        raise AuditError(f"need 0 <= covered <= n, got {covered}/{n}")
    tail = (1.0 - level) / 2.0
    lo = 0.0 if covered == 0 else float(stats.beta.ppf(tail, covered, n - covered + 1))
    hi = 1.0 if covered == n else float(stats.beta.ppf(1.0 - tail, covered + 1, n - covered))
    return lo, hi


@dataclass(frozen=True)
class Stratum:
    rate: float
    ci_low: float
    ci_high: float
    n: int
    covered: int

    @classmethod
    def from_counts(cls, covered: int, n: int) -> "Stratum":
        lo, hi = clopper_pearson(covered, n)
        return cls(rate=covered / n, ci_low=lo, ci_high=hi, n=n, covered=covered)


@dataclass(frozen=True)
class Efficiency:
    mean_size: float
    frac_singleton: float
    frac_full: float


@dataclass(frozen=True)
class CoverageReport:
    marginal: Stratum
    per_class: dict[int, Stratum]
    per_group: dict[str, Stratum]
    per_set_size: dict[int, Stratum]
    efficiency: Efficiency
    alpha: float | None = None

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "marginal": asdict(self.marginal),
            "per_class": {str(k): asdict(v) for k, v in self.per_class.items()},
            "per_group": {k: asdict(v) for k, v in self.per_group.items()},
            "per_set_size": {str(k): asdict(v) for k, v in self.per_set_size.items()},
            "efficiency": asdict(self.efficiency),
        }

    def rows(self) -> list[dict]:
        """One tidy row per stratum."""
        out = [{"stratification": "marginal", "stratum": "all", **asdict(self.marginal)}]
        for name, table in (("class", self.per_class), ("group", self.per_group),
                            ("set_size", self.per_set_size)):
            out += [{"stratification": name, "stratum": str(k), **asdict(v)} for k, v in table.items()]
        return out

    def write(self, json_path=None, csv_path=None) -> None:
        if json_path is not None:
            write_json(self.to_dict(), json_path)
        if csv_path is not None:
            write_rows(self.rows(), csv_path)


def write_json(doc, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def write_rows(rows: Sequence[Mapping], path, fieldnames: Sequence[str] | None = None) -> None:
    fieldnames = list(fieldnames or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _as_membership(sets, ds: LabeledDataset) -> np.ndarray:
    if isinstance(sets, np.ndarray):
        member = sets.astype(bool)
        if member.shape != (len(ds), ds.k):
            raise AuditError(f"membership shape {member.shape} does not match dataset ({len(ds)}, {ds.k})")
        return member
    if len(sets) != len(ds):
        raise AuditError(f"{len(sets)} prediction sets for {len(ds)} records")
    for i, s in enumerate(sets):
        if s.record_id and s.record_id != ds.ids[i]:
            raise AuditError(f"set {i} is for record {s.record_id!r} but dataset row is {ds.ids[i]!r}")
    try:
        return sets_to_membership(sets, ds.k)
    except ValueError as exc:
        raise AuditError(str(exc)) from None


def _strata(keys: np.ndarray, covered: np.ndarray) -> dict:
    out = {}
    for key in sorted(set(keys.tolist())):
        mask = keys == key
        out[key] = Stratum.from_counts(int(covered[mask].sum()), int(mask.sum()))
    return out


def coverage_report(sets, ds: LabeledDataset, alpha: float | None = None) -> CoverageReport:
    """Coverage overall and per class, group category and set size.

    ``sets`` is a list of :class:`PredictionSet` aligned with ``ds`` (or an
    (n, K) boolean membership matrix).  Strata with no records are omitted.
    """
    member = _as_membership(sets, ds)
    n = len(ds)
    covered = member[np.arange(n), ds.labels]
    sizes = member.sum(axis=1)
    per_group = {}
    for attr in sorted(ds.groups):
        for value, s in _strata(ds.groups[attr], covered).items():
            per_group[f"{attr}={value}"] = s
    return CoverageReport(
        marginal=Stratum.from_counts(int(covered.sum()), n),
        per_class=_strata(ds.labels, covered),
        per_group=per_group,
        per_set_size=_strata(sizes, covered),
        efficiency=Efficiency(mean_size=float(sizes.mean()), frac_singleton=float(np.mean(sizes == 1)),
                              frac_full=float(np.mean(sizes == ds.k))),
        alpha=alpha,
    )


def set_size_coverage(sets, ds: LabeledDataset) -> dict[int, float]:
    member = _as_membership(sets, ds)
    covered = member[np.arange(len(ds)), ds.labels]
    return {int(k): v.rate for k, v in _strata(member.sum(axis=1), covered).items()}


# --------------------------------------------------------------------------
# Sweeps over the target coverage
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class CurvePoint:
    target: float
    empirical: float
    mean_size: float


@dataclass(frozen=True)
class CalibrationCurve:
    points: list[CurvePoint]

    def rows(self) -> list[dict]:
        return [asdict(p) for p in self.points]


@dataclass(frozen=True)
class EfficiencyPoint:
    target: float
    frac_singleton: float
    mean_size: float
    informativeness: float | None = None


def default_targets(accuracy: float, num: int = 50, top: float = 0.999) -> np.ndarray:
    """Evenly spaced target coverages from the model's accuracy up to ``top``."""
    lo = min(max(accuracy, 1e-3), top)
    targets = np.unique(np.round(np.linspace(lo, top, num), 12))
    return targets[(targets > 0) & (targets < 1)]


def _targets(alphas) -> np.ndarray:
    alphas = np.asarray(list(alphas), dtype=np.float64)
    if alphas.size == 0:
        raise AuditError("alpha grid is empty")
    if np.any((alphas <= 0) | (alphas >= 1)):
        raise AuditError("every alpha must lie in (0, 1)")
    return np.unique(1.0 - alphas)


def sweep_memberships(cal: LabeledDataset, ev: LabeledDataset, alphas, cfg: ScoreConfig):
    """Yield ``(target, membership)`` on ``ev`` for each alpha, targets increasing.

    The score matrix is computed once; only the threshold changes per alpha.
    """
    cal_scores = label_scores(cal, cfg)
    scores = aps_score_matrix(ev.probs, draw_u(cfg, len(ev), PREDICT_STREAM))
    rows = np.arange(len(ev))
    top = np.argmax(ev.probs, axis=1)
    for target in _targets(alphas):
        tau = calibrate(cal_scores, 1.0 - target).tau
        member = scores <= tau
        empty = ~member.any(axis=1)
        member[rows[empty], top[empty]] = True
        yield float(target), member


def calibration_curve(cal: LabeledDataset, ev: LabeledDataset, alphas, cfg: ScoreConfig) -> CalibrationCurve:
    points = []
    for target, member in sweep_memberships(cal, ev, alphas, cfg):
        covered = member[np.arange(len(ev)), ev.labels]
        points.append(CurvePoint(target=target, empirical=float(covered.mean()),
                                 mean_size=float(member.sum(axis=1).mean())))
    return CalibrationCurve(points)


def collapse_membership(member: np.ndarray, taxonomy: Mapping[int, int]) -> np.ndarray:
    k = member.shape[1]
    missing = [c for c in range(k) if c not in taxonomy]
    if missing:
        raise AuditError(f"class {missing[0]} has no superclass")
    sup = np.array([taxonomy[c] for c in range(k)])
    out = np.zeros((member.shape[0], sup.max() + 1), dtype=bool)
    for s in np.unique(sup):
        out[:, s] = member[:, sup == s].any(axis=1)
    return out


def superclass_collapse(sets: Sequence[PredictionSet], taxonomy: Mapping[int, int]):
    """Map sets through ``taxonomy``; returns (collapsed sets, fraction of collapsed singletons)."""
    collapsed = []
    for s in sets:
        try:
            collapsed.append(tuple(sorted({taxonomy[c] for c in s.members})))
        except KeyError as exc:
            raise AuditError(f"class {exc.args[0]} has no superclass") from None
    if not collapsed:
        return [], float("nan")
    return collapsed, sum(len(c) == 1 for c in collapsed) / len(collapsed)


def efficiency_curve(cal: LabeledDataset, ev: LabeledDataset, alphas, cfg: ScoreConfig,
                     taxonomy: Mapping[int, int] | None = None) -> list[EfficiencyPoint]:
    """Singleton fraction and mean set size per target coverage, on the evaluation split only.

    With a taxonomy (default: the evaluation dataset's) each point also
    carries the fraction of sets that collapse to a single superclass.
    """
    taxonomy = taxonomy if taxonomy is not None else ev.taxonomy
    points = []
    for target, member in sweep_memberships(cal, ev, alphas, cfg):
        sizes = member.sum(axis=1)
        info = None
        if taxonomy is not None:
            info = float(np.mean(collapse_membership(member, taxonomy).sum(axis=1) == 1))
        points.append(EfficiencyPoint(target=target, frac_singleton=float(np.mean(sizes == 1)),
                                      mean_size=float(sizes.mean()), informativeness=info))
    return points
