"""Label and score shift simulation, and the recalibration workflow.

``score_shift`` is a desk-scale stand-in for a change of acquisition site: it
tempers each probability vector and perturbs it with multiplicative noise,
which degrades the model's calibration while leaving labels untouched.  It
imitates the effect of a real domain shift on conformity scores, it does not
model any particular one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .audit import CoverageReport, coverage_report
from .conformal import ScoreConfig, calibrate_dataset, dataset_membership
from .core import DatasetError, LabeledDataset, SplitSpec, resample_weighted, split_indices

LABEL_SHIFT, SCORE_SHIFT = "label_shift", "score_shift"


class ShiftError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftSpec:
    """A shift to apply to an in-distribution dataset.

    ``target`` is required for label shift; ``temperature`` and
    ``noise_scale`` only matter for score shift.  ``size`` is the number of
    resampled records for label shift (defaults to the input size).
    """

    kind: str
    target: tuple[float, ...] | None = None
    temperature: float = 1.0
    noise_scale: float = 0.0
    seed: int = 0
    size: int | None = None

    def __post_init__(self):
        if self.kind not in (LABEL_SHIFT, SCORE_SHIFT):
            raise ShiftError(f"unknown shift kind {self.kind!r}")
        if self.kind == LABEL_SHIFT:
            if self.target is None:
                raise ShiftError("label_shift needs a target class distribution")
            t = np.asarray(self.target, dtype=np.float64)
            if t.ndim != 1 or np.any(~np.isfinite(t)) or np.any(t < 0) or abs(t.sum() - 1.0) > 1e-9:
                raise ShiftError(f"target must be a probability vector, got {list(self.target)}")
            object.__setattr__(self, "target", tuple(t.tolist()))
        if not self.temperature > 0:
            raise ShiftError("temperature must be positive")
        if not self.noise_scale >= 0:
            raise ShiftError("noise_scale must be nonnegative")
        if self.size is not None and self.size < 1:
            raise ShiftError("size must be positive")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ShiftSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ShiftError(f"unknown ShiftSpec field(s): {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ShiftError(str(exc)) from None

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


@dataclass(frozen=True)
class ShiftExperimentResult:
    coverage_before: float
    coverage_after_shift: float
    coverage_after_recalibration: float
    alpha: float
    n_recal: int
    n_holdout: int = 0
    coverage_weighted: float | None = None
    reports: Mapping[str, CoverageReport] = field(default_factory=dict, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("reports")
        return d


def label_shift_weights(cal: LabeledDataset, target) -> np.ndarray:
    """Per-class importance weights ``target[k] / empirical_cal[k]``."""
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (cal.k,):
        raise ShiftError(f"target has {target.size} entries, expected {cal.k}")
    emp = cal.class_distribution()
    absent = np.flatnonzero((target > 0) & (emp == 0))
    if absent.size:
        raise ShiftError(f"target puts mass on class {int(absent[0])}, which has no calibration records")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(emp > 0, target / np.where(emp > 0, emp, 1.0), 0.0)


def temper(probs: np.ndarray, temperature: float, noise_scale: float, rng: np.random.Generator) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logits = np.log(probs) / temperature
    if noise_scale > 0:
        logits = logits + noise_scale * rng.standard_normal(probs.shape)
    logits -= logits.max(axis=1, keepdims=True)
    out = np.exp(logits)
    return out / out.sum(axis=1, keepdims=True)


def apply_shift(ds: LabeledDataset, spec: ShiftSpec) -> LabeledDataset:
    """Shifted copy of ``ds``; K, class names and taxonomy are preserved."""
    if spec.kind == LABEL_SHIFT:
        try:
            weights = label_shift_weights(ds, spec.target)
            return resample_weighted(ds, weights, spec.size or len(ds), spec.seed)
        except DatasetError as exc:
            raise ShiftError(str(exc)) from None
    rng = np.random.default_rng(spec.seed)
    return ds.with_probs(temper(ds.probs, spec.temperature, spec.noise_scale, rng))


def adversarial_target(ds: LabeledDataset, per_class_coverage: Mapping[int, float],
                       factor: float = 3.0, cap: float = 0.9) -> np.ndarray:
    """Label distribution that multiplies the worst-covered class's share by ``factor`` (capped).

    The remaining classes keep their relative proportions.
    """
    emp = ds.class_distribution()
    present = [c for c in per_class_coverage if emp[c] > 0]
    if not present:
        raise ShiftError("no class has both records and a coverage estimate")
    worst = min(present, key=lambda c: (per_class_coverage[c], c))
    share = min(emp[worst] * factor, cap)
    rest = emp.copy()
    rest[worst] = 0.0
    target = rest / rest.sum() * (1.0 - share) if rest.sum() > 0 else rest
    target[worst] = share
    return target


def _coverage(ds: LabeledDataset, calib, cfg: ScoreConfig) -> tuple[float, CoverageReport]:
    report = coverage_report(dataset_membership(ds, calib, cfg), ds, calib.alpha)
    return report.marginal.rate, report


def shift_experiment(cal: LabeledDataset, ev: LabeledDataset, spec: ShiftSpec, cfg: ScoreConfig,
                     n_recal: int, seed: int) -> ShiftExperimentResult:
    """Coverage before shift, after shift, and after recalibrating on shifted data.

    ``n_recal`` shifted records are set aside for recalibration; the rest form
    the shifted hold-out on which both post-shift coverages are measured.  For
    label shift the original calibration set is also reweighted towards the
    target distribution (``coverage_weighted``).
    """
    calib = calibrate_dataset(cal, cfg)
    before, rep_before = _coverage(ev, calib, cfg)
    shifted = apply_shift(ev, spec)
    if not 0 < n_recal < len(shifted):
        raise ShiftError(f"insufficient shifted data: {len(shifted)} shifted records for n_recal={n_recal}")
    recal_idx, hold_idx = split_indices(shifted.labels, SplitSpec(n_recal, seed), shifted.k)
    recal, holdout = shifted.subset(recal_idx), shifted.subset(hold_idx)
    after, rep_after = _coverage(holdout, calib, cfg)
    recalib = calibrate_dataset(recal, cfg)
    restored, rep_restored = _coverage(holdout, recalib, cfg)
    weighted = None
    reports = {"before": rep_before, "after_shift": rep_after, "after_recalibration": rep_restored}
    if spec.kind == LABEL_SHIFT:
        wcal = calibrate_dataset(cal, cfg, class_weights=label_shift_weights(cal, spec.target))
        weighted, reports["weighted"] = _coverage(holdout, wcal, cfg)
    return ShiftExperimentResult(coverage_before=before, coverage_after_shift=after,
                                 coverage_after_recalibration=restored, alpha=cfg.alpha,
                                 n_recal=n_recal, n_holdout=len(holdout), coverage_weighted=weighted,
                                 reports=reports)
