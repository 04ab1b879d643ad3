"""APS conformity scores, split-conformal calibration and prediction sets.

The conformity score of label ``y`` is the probability mass of every class
ranked at or above ``y`` when classes are sorted by descending probability
(ties go to the lower class index).  A calibration threshold ``tau`` is a
conservative empirical quantile of calibration scores; the prediction set
keeps every label whose score is at most ``tau``.  Because the highest ranked
class has the smallest score, these sets are always prefixes of the sorted
class order, and an otherwise empty set is replaced by ``{argmax}``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import LabeledDataset

# relative slack on the quantile level so that e.g. (n+1)(1-alpha) = 9.000000000000002
# still yields rank 9
QUANTILE_EPS = 1e-12

PLAIN, WEIGHTED, MONDRIAN = "plain", "weighted", "mondrian"


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreConfig:
    alpha: float = 0.1
    randomized: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise CalibrationError(f"alpha must lie in (0, 1), got {self.alpha}")

    @property
    def score_name(self) -> str:
        return "randomized" if self.randomized else "deterministic"


@dataclass(frozen=True)
class CalibrationResult:
    """Threshold(s) found on calibration data.

    For Mondrian calibration ``partition`` is ``"class"`` or ``"group:<attr>"``,
    ``partition_thresholds`` maps each cell key to ``(tau, n)`` and ``tau`` is
    the largest cell threshold.
    """

    tau: float
    n_cal: int
    alpha: float
    variant: str = PLAIN
    randomized: bool = False
    partition: str | None = None
    partition_thresholds: Mapping[object, tuple[float, int]] | None = None
    weights_used: tuple[float, ...] | None = None

    def to_dict(self) -> dict:
        d = {
            "tau": self.tau,
            "alpha": self.alpha,
            "n_cal": self.n_cal,
            "variant": self.variant,
            "score": "randomized" if self.randomized else "deterministic",
            "partition": self.partition,
        }
        if self.partition_thresholds is not None:
            d["partition_thresholds"] = {
                str(k): {"tau": t, "n": n} for k, (t, n) in self.partition_thresholds.items()
            }
        if self.weights_used is not None:
            d["weights_used"] = list(self.weights_used)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibrationResult":
        try:
            partition = d.get("partition")
            thresholds = None
            if d.get("partition_thresholds") is not None:
                conv = int if partition == "class" else str
                thresholds = {conv(k): (float(v["tau"]), int(v["n"]))
                              for k, v in d["partition_thresholds"].items()}
            weights = d.get("weights_used")
            return cls(tau=float(d["tau"]), n_cal=int(d["n_cal"]), alpha=float(d["alpha"]),
                       variant=d.get("variant", PLAIN),
                       randomized=d.get("score", "deterministic") == "randomized",
                       partition=partition, partition_thresholds=thresholds,
                       weights_used=None if weights is None else tuple(float(w) for w in weights))
        except (KeyError, TypeError, ValueError) as exc:
            raise CalibrationError(f"malformed calibration record: {exc!r}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CalibrationResult":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class PredictionSet:
    members: tuple[int, ...]
    score_of_label: float | None = None
    record_id: str = ""

    def __post_init__(self):
        if not self.members:
            raise ValueError("prediction sets are never empty")
        object.__setattr__(self, "members", tuple(sorted(int(m) for m in set(self.members))))

    def __len__(self) -> int:
        return len(self.members)

    def __contains__(self, label) -> bool:
        return int(label) in self.members


# --------------------------------------------------------------------------
# Scores
# --------------------------------------------------------------------------

def aps_score_matrix(probs: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
    """APS scores of every label for every row of ``probs``.

    ``u`` (one uniform draw per row) switches on the randomised variant,
    which subtracts ``u * probs[y]`` from the cumulative mass.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    order = np.argsort(-probs, axis=1, kind="stable")
    cum = np.cumsum(np.take_along_axis(probs, order, axis=1), axis=1)
    scores = np.empty_like(probs)
    np.put_along_axis(scores, order, cum, axis=1)
    if u is not None:
        scores -= np.asarray(u, dtype=np.float64).reshape(-1, 1) * probs
    return np.clip(scores, 0.0, 1.0)


def aps_score(probs, label: int, u: float | None = None) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.size:
        raise ValueError(f"label {label} out of range for K={probs.size}")
    return float(aps_score_matrix(probs[None, :], None if u is None else np.array([u]))[0, label])


def draw_u(cfg: ScoreConfig, n: int, stream: int) -> np.ndarray | None:
    """Randomisation draws for ``n`` records; calibration and prediction use different streams."""
    if not cfg.randomized:
        return None
    return np.random.default_rng([cfg.seed, stream]).random(n)


CAL_STREAM, PREDICT_STREAM = 0, 1


def label_scores(ds: LabeledDataset, cfg: ScoreConfig, stream: int = CAL_STREAM) -> np.ndarray:
    """Score of each record's true label."""
    scores = aps_score_matrix(ds.probs, draw_u(cfg, len(ds), stream))
    return scores[np.arange(len(ds)), ds.labels]


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

def conformal_rank(n: int, alpha: float) -> int:
    """1-based rank of the calibration quantile, ceil((n+1)(1-alpha))."""
    return math.ceil((n + 1) * ((1.0 - alpha) - QUANTILE_EPS))


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise CalibrationError(f"alpha must lie in (0, 1), got {alpha}")


def calibrate(scores: Sequence[float], alpha: float) -> CalibrationResult:
    """Plain split-conformal threshold.

    ``tau`` is the ``ceil((n+1)(1-alpha))``-th smallest score, or 1 when that
    rank exceeds ``n`` (every set then contains all labels).
    """
    _check_alpha(alpha)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n = s.size
    if n == 0:
        raise CalibrationError("cannot calibrate on an empty score list")
    rank = conformal_rank(n, alpha)
    tau = 1.0 if rank > n else float(np.partition(s, rank - 1)[rank - 1])
    return CalibrationResult(tau=tau, n_cal=n, alpha=alpha, variant=PLAIN)


def weighted_quantile_tau(scores: np.ndarray, weights: np.ndarray, alpha: float) -> float:
    """Smallest score ``t`` with sum(w[s <= t]) / (sum(w) + max(w)) >= 1 - alpha, else 1.

    The ``max(w)`` term stands in for the unknown weight of the test point;
    with equal weights this is exactly the plain conformal rank.
    """
    order = np.argsort(scores, kind="stable")
    s, w = scores[order], weights[order]
    cw = np.cumsum(w)
    total = cw[-1] + w.max()
    # cumulative weight is only meaningful at the last element of a run of tied scores
    ends = np.append(s[1:] != s[:-1], True)
    ok = np.flatnonzero(ends & (cw / total >= (1.0 - alpha) - QUANTILE_EPS))
    return float(s[ok[0]]) if ok.size else 1.0


def weighted_calibrate(scores: Sequence[float], weights: Sequence[float], alpha: float) -> CalibrationResult:
    """Weighted split-conformal threshold, used to reweight calibration data under label shift."""
    _check_alpha(alpha)
    s = np.asarray(scores, dtype=np.float64).ravel()
    w = np.asarray(weights, dtype=np.float64).ravel()
    if s.size == 0:
        raise CalibrationError("cannot calibrate on an empty score list")
    if s.shape != w.shape:
        raise CalibrationError(f"{s.size} scores but {w.size} weights")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise CalibrationError("weights must be finite and positive")
    return CalibrationResult(tau=weighted_quantile_tau(s, w, alpha), n_cal=s.size, alpha=alpha,
                             variant=WEIGHTED, weights_used=tuple(w.tolist()))


def parse_partition(partition: str | None) -> str | None:
    """Normalise partition names: ``None``/``"none"``, ``"class"``/``"by_class"``, ``"group:<attr>"``."""
    if partition is None or partition in ("none", ""):
        return None
    if partition in ("class", "by_class"):
        return "class"
    for prefix in ("group:", "by_group:"):
        if partition.startswith(prefix) and len(partition) > len(prefix):
            return "group:" + partition[len(prefix):]
    raise CalibrationError(f"unknown partition {partition!r}; use none, class or group:<attr>")


def partition_keys(ds: LabeledDataset, partition: str) -> np.ndarray:
    partition = parse_partition(partition)
    if partition == "class":
        return ds.labels
    attr = partition.split(":", 1)[1]
    if attr not in ds.groups:
        raise CalibrationError(f"dataset has no group attribute {attr!r}")
    return ds.groups[attr]


def mondrian_calibrate(cal: LabeledDataset, partition: str, cfg: ScoreConfig,
                       expected_keys: Sequence | None = None) -> CalibrationResult:
    """One plain threshold per partition cell.

    With ``partition="class"`` every class index in ``range(K)`` must have
    calibration records; for group partitions the cells are the observed
    categories plus any ``expected_keys``.
    """
    partition = parse_partition(partition)
    if partition is None:
        raise CalibrationError("mondrian calibration needs a partition")
    scores = label_scores(cal, cfg)
    keys = partition_keys(cal, partition)
    if partition == "class":
        cells = list(range(cal.k))
    else:
        cells = sorted(set(keys.tolist()) | set(map(str, expected_keys or ())))
    thresholds = {}
    for key in cells:
        cell = scores[keys == key]
        if cell.size == 0:
            raise CalibrationError(
                f"partition cell {partition}={key!r} has no calibration records; "
                "collect calibration data for this cell or coarsen the partition")
        thresholds[key] = (calibrate(cell, cfg.alpha).tau, int(cell.size))
    return CalibrationResult(tau=max(t for t, _ in thresholds.values()), n_cal=len(cal),
                             alpha=cfg.alpha, variant=MONDRIAN, randomized=cfg.randomized,
                             partition=partition, partition_thresholds=thresholds)


def calibrate_dataset(cal: LabeledDataset, cfg: ScoreConfig, partition: str | None = None,
                      class_weights=None) -> CalibrationResult:
    """Calibrate on a dataset: plain, Mondrian (``partition``) or label-weighted (``class_weights``)."""
    partition = parse_partition(partition)
    if partition is not None:
        if class_weights is not None:
            raise CalibrationError("weighted Mondrian calibration is not supported")
        return mondrian_calibrate(cal, partition, cfg)
    scores = label_scores(cal, cfg)
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)[cal.labels]
        keep = w > 0
        res = weighted_calibrate(scores[keep], w[keep], cfg.alpha)
    else:
        res = calibrate(scores, cfg.alpha)
    return CalibrationResult(tau=res.tau, n_cal=res.n_cal, alpha=res.alpha, variant=res.variant,
                             randomized=cfg.randomized, weights_used=res.weights_used)


# --------------------------------------------------------------------------
# Prediction sets
# --------------------------------------------------------------------------

def _thresholds(calib: CalibrationResult, n: int, k: int, keys) -> np.ndarray:
    """Threshold array broadcastable against an (n, K) score matrix."""
    if calib.variant != MONDRIAN:
        return np.float64(calib.tau)
    cells = calib.partition_thresholds
    if calib.partition == "class":
        missing = [c for c in range(k) if c not in cells]
        if missing:
            raise CalibrationError(f"class calibration has no threshold for class {missing[0]}")
        return np.array([cells[c][0] for c in range(k)])[None, :]
    if keys is None:
        raise CalibrationError(f"mondrian calibration on {calib.partition} needs a partition key")
    keys = np.broadcast_to(np.asarray(keys, dtype=object), (n,))
    try:
        return np.array([cells[str(key)][0] for key in keys])[:, None]
    except KeyError as exc:
        raise CalibrationError(f"no calibration threshold for partition key {exc.args[0]!r}") from None


def membership(probs: np.ndarray, calib: CalibrationResult, keys=None,
               u: np.ndarray | None = None) -> np.ndarray:
    """Boolean (n, K) matrix: entry [i, y] says label y is in record i's set."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n, k = probs.shape
    scores = aps_score_matrix(probs, u)
    member = scores <= _thresholds(calib, n, k, keys)
    empty = ~member.any(axis=1)
    if np.any(empty):
        member[np.flatnonzero(empty), np.argmax(probs[empty], axis=1)] = True
    return member


def predict_set(probs, calib: CalibrationResult, key=None, u: float | None = None,
                label: int | None = None, record_id: str = "") -> PredictionSet:
    probs = np.asarray(probs, dtype=np.float64)
    uu = None if u is None else np.array([u])
    member = membership(probs[None, :], calib, None if key is None else [key], uu)[0]
    score = None if label is None else aps_score(probs, label, u)
    return PredictionSet(members=tuple(np.flatnonzero(member).tolist()), score_of_label=score,
                         record_id=record_id)


def dataset_keys(ds: LabeledDataset, calib: CalibrationResult):
    if calib.variant == MONDRIAN and calib.partition != "class":
        return partition_keys(ds, calib.partition)
    return None


def dataset_membership(ds: LabeledDataset, calib: CalibrationResult, cfg: ScoreConfig | None = None) -> np.ndarray:
    cfg = cfg or ScoreConfig(alpha=calib.alpha, randomized=calib.randomized)
    return membership(ds.probs, calib, dataset_keys(ds, calib), draw_u(cfg, len(ds), PREDICT_STREAM))


def predict_sets(ds: LabeledDataset, calib: CalibrationResult, cfg: ScoreConfig | None = None) -> list[PredictionSet]:
    """Prediction sets for every record of ``ds``, carrying each true label's score."""
    cfg = cfg or ScoreConfig(alpha=calib.alpha, randomized=calib.randomized)
    u = draw_u(cfg, len(ds), PREDICT_STREAM)
    member = membership(ds.probs, calib, dataset_keys(ds, calib), u)
    label_score = aps_score_matrix(ds.probs, u)[np.arange(len(ds)), ds.labels]
    return [PredictionSet(members=tuple(np.flatnonzero(member[i]).tolist()),
                          score_of_label=float(label_score[i]), record_id=ds.ids[i])
            for i in range(len(ds))]


def sets_to_membership(sets: Sequence[PredictionSet], k: int) -> np.ndarray:
    member = np.zeros((len(sets), k), dtype=bool)
    for i, s in enumerate(sets):
        if s.members[-1] >= k:
            raise ValueError(f"set {i} has class {s.members[-1]} outside [0, {k})")
        member[i, list(s.members)] = True
    return member


def membership_to_sets(member: np.ndarray, ids: Sequence[str] = None) -> list[PredictionSet]:
    ids = ids if ids is not None else [str(i) for i in range(len(member))]
    return [PredictionSet(members=tuple(np.flatnonzero(row).tolist()), record_id=ids[i])
            for i, row in enumerate(member)]


def save_sets(sets: Sequence[PredictionSet], path) -> None:
    doc = [{"id": s.record_id, "members": list(s.members), "score_of_label": s.score_of_label}
           for s in sets]
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_sets(path) -> list[PredictionSet]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise ValueError("prediction-set file must hold a JSON array")
    out = []
    for i, d in enumerate(doc, start=1):
        try:
            out.append(PredictionSet(members=tuple(d["members"]), score_of_label=d.get("score_of_label"),
                                     record_id=str(d.get("id", i - 1))))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"row {i}: malformed prediction set ({exc})") from None
    return out
