"""Domain types, dataset ingestion, splitting and weighted resampling.

Datasets are stored column-wise (an ``(n, K)`` probability matrix plus label,
id and group columns) because every downstream computation is vectorised over
records.  :class:`PredictionRecord` is the row view used for I/O and for
callers that want to work one sample at a time.

All randomness goes through ``numpy.random.default_rng(seed)`` (PCG64), so a
split or resample is a pure function of its inputs and the seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

SIMPLEX_TOL = 1e-6

_GROUP_PREFIX = "group."


class DatasetError(ValueError):
    """Raised when prediction data violates the record or file schema."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


def _check_simplex(probs: np.ndarray, row: int | None = None) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1 or probs.size < 2:
        raise DatasetError(f"expected at least 2 class probabilities, got {probs.size}", row)
    if not np.all(np.isfinite(probs)) or np.any(probs < 0.0) or np.any(probs > 1.0):
        raise DatasetError("probabilities must lie in [0, 1]", row)
    total = float(probs.sum())
    if abs(total - 1.0) > SIMPLEX_TOL:
        raise DatasetError(f"probability-sum violation (sum {total:.6g})", row)
    return probs / total


@dataclass(frozen=True)
class PredictionRecord:
    """One sample: the model's probability vector, its true label and group tags."""

    probs: tuple[float, ...]
    label: int
    groups: Mapping[str, str] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        probs = _check_simplex(np.asarray(self.probs, dtype=np.float64))
        object.__setattr__(self, "probs", tuple(float(p) for p in probs))
        if not 0 <= int(self.label) < len(self.probs):
            raise DatasetError(f"label out of range: {self.label} not in [0, {len(self.probs)})")
        object.__setattr__(self, "label", int(self.label))
        object.__setattr__(self, "groups", {str(k): str(v) for k, v in self.groups.items()})

    @property
    def k(self) -> int:
        return len(self.probs)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Model outputs with ground-truth labels.

    Parameters
    ----------
    probs : array of shape (n, K)
        Rows are probability vectors; rows within ``SIMPLEX_TOL`` of summing
        to one are renormalised exactly.
    labels : array of shape (n,)
    ids : sequence of str, optional
        Stable record identifiers.  Defaults to ``"0"``, ``"1"``, ...
    groups : mapping of attribute name -> array of shape (n,), optional
        Flat string categories per record.
    class_names : sequence of K str, optional
    taxonomy : mapping class index -> superclass index, optional
    superclass_names : sequence of str, optional
    """

    probs: np.ndarray
    labels: np.ndarray
    ids: np.ndarray = None
    groups: Mapping[str, np.ndarray] = field(default_factory=dict)
    class_names: tuple[str, ...] = None
    taxonomy: Mapping[int, int] | None = None
    superclass_names: tuple[str, ...] | None = None

    def __post_init__(self):
        probs = np.array(self.probs, dtype=np.float64)
        if probs.ndim != 2 or probs.shape[1] < 2:
            raise DatasetError(f"probs must have shape (n, K>=2), got {probs.shape}")
        n, k = probs.shape
        if not np.all(np.isfinite(probs)) or np.any(probs < 0.0) or np.any(probs > 1.0):
            bad = int(np.flatnonzero(~np.all((probs >= 0.0) & (probs <= 1.0), axis=1))[0])
            raise DatasetError("probabilities must lie in [0, 1]", bad)
        sums = probs.sum(axis=1)
        off = np.abs(sums - 1.0) > SIMPLEX_TOL
        if np.any(off):
            bad = int(np.flatnonzero(off)[0])
            raise DatasetError(f"probability-sum violation (sum {sums[bad]:.6g})", bad)
        probs /= sums[:, None]

        labels = np.array(self.labels)
        if labels.shape != (n,):
            raise DatasetError(f"labels must have shape ({n},), got {labels.shape}")
        if labels.dtype.kind not in "iu":
            if n and not np.all(np.equal(np.mod(labels, 1), 0)):
                raise DatasetError("labels must be integers")
        labels = labels.astype(np.int64)
        out = (labels < 0) | (labels >= k)
        if np.any(out):
            bad = int(np.flatnonzero(out)[0])
            raise DatasetError(f"label out of range: {labels[bad]} not in [0, {k})", bad)

        ids = np.array([str(i) for i in range(n)] if self.ids is None else [str(i) for i in self.ids],
                       dtype=object)
        if ids.shape != (n,):
            raise DatasetError(f"expected {n} ids, got {ids.shape[0]}")

        groups = {}
        for name, values in (self.groups or {}).items():
            col = np.array([str(v) for v in values], dtype=object)
            if col.shape != (n,):
                raise DatasetError(f"group column {name!r} has {col.shape[0]} values, expected {n}")
            groups[str(name)] = _frozen(col)

        class_names = (tuple(f"class_{i}" for i in range(k)) if self.class_names is None
                       else tuple(str(c) for c in self.class_names))
        if len(class_names) != k:
            raise DatasetError(f"expected {k} class names, got {len(class_names)}")

        taxonomy = None
        superclass_names = None
        if self.taxonomy is not None:
            taxonomy = {int(c): int(s) for c, s in self.taxonomy.items()}
            missing = sorted(set(range(k)) - set(taxonomy))
            if missing:
                raise DatasetError(f"taxonomy has no superclass for class {missing[0]}")
            if any(s < 0 for s in taxonomy.values()) or set(taxonomy) - set(range(k)):
                raise DatasetError("taxonomy maps invalid class or superclass indices")
            n_super = max(taxonomy.values()) + 1
            if self.superclass_names is None:
                superclass_names = tuple(f"superclass_{i}" for i in range(n_super))
            else:
                superclass_names = tuple(str(s) for s in self.superclass_names)
                if len(superclass_names) < n_super:
                    raise DatasetError("taxonomy references a superclass without a name")

        object.__setattr__(self, "probs", _frozen(probs))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "ids", _frozen(ids))
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "class_names", class_names)
        object.__setattr__(self, "taxonomy", taxonomy)
        object.__setattr__(self, "superclass_names", superclass_names)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def k(self) -> int:
        return self.probs.shape[1]

    @property
    def records(self) -> list[PredictionRecord]:
        return [
            PredictionRecord(
                probs=tuple(self.probs[i]),
                label=int(self.labels[i]),
                groups={name: col[i] for name, col in self.groups.items()},
                id=self.ids[i],
            )
            for i in range(len(self))
        ]

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord], class_names=None, taxonomy=None,
                     superclass_names=None) -> "LabeledDataset":
        if not records:
            raise DatasetError("dataset has no records")
        ks = {r.k for r in records}
        if len(ks) != 1:
            raise DatasetError(f"inconsistent number of classes across records: {sorted(ks)}")
        names = sorted({g for r in records for g in r.groups})
        return cls(
            probs=np.array([r.probs for r in records]),
            labels=np.array([r.label for r in records]),
            ids=[r.id for r in records],
            groups={g: [r.groups.get(g, "") for r in records] for g in names},
            class_names=class_names,
            taxonomy=taxonomy,
            superclass_names=superclass_names,
        )

    def subset(self, index) -> "LabeledDataset":
        """Rows selected by an integer index array (order and repeats preserved)."""
        index = np.asarray(index, dtype=np.int64)
        return self._derive(self.probs[index], self.labels[index], self.ids[index],
                            {g: col[index] for g, col in self.groups.items()})

    def with_probs(self, probs: np.ndarray) -> "LabeledDataset":
        return self._derive(probs, self.labels, self.ids, self.groups)

    def _derive(self, probs, labels, ids, groups) -> "LabeledDataset":
        return LabeledDataset(probs=probs, labels=labels, ids=ids, groups=groups,
                              class_names=self.class_names, taxonomy=self.taxonomy,
                              superclass_names=self.superclass_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)

    def class_distribution(self) -> np.ndarray:
        return self.class_counts() / len(self)

    def accuracy(self) -> float:
        """Top-1 accuracy of the argmax prediction (ties go to the lowest index)."""
        return float(np.mean(np.argmax(self.probs, axis=1) == self.labels))


@dataclass(frozen=True)
class SplitSpec:
    calibration_size: int
    seed: int = 0
    stratify_by_class: bool = False

    def validate(self, n: int) -> None:
        if not 0 < self.calibration_size < n:
            raise DatasetError(
                f"calibration_size must satisfy 0 < size < {n}, got {self.calibration_size}")


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------

def _parse_float(value: str, row: int, column: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise DatasetError(f"malformed value {value!r} in column {column!r}", row) from None


def _parse_label(value, row: int) -> int:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise DatasetError(f"malformed label {value!r}", row) from None
    if not f.is_integer():
        raise DatasetError(f"malformed label {value!r}", row)
    return int(f)


def _build(probs_rows, labels, ids, groups, class_names=None, taxonomy=None,
           superclass_names=None) -> LabeledDataset:
    if not probs_rows:
        raise DatasetError("dataset has no records")
    k = len(probs_rows[0])
    for i, (p, y) in enumerate(zip(probs_rows, labels), start=1):
        if len(p) != k:
            raise DatasetError(f"inconsistent K: expected {k} probabilities, got {len(p)}", i)
        _check_simplex(np.asarray(p), i)
        if not 0 <= y < k:
            raise DatasetError(f"label out of range: {y} not in [0, {k})", i)
    return LabeledDataset(probs=np.array(probs_rows, dtype=np.float64), labels=np.array(labels),
                          ids=ids, groups=groups, class_names=class_names, taxonomy=taxonomy,
                          superclass_names=superclass_names)


def _load_csv(path: Path) -> LabeledDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError("empty file") from None
        if not header or header[0] != "id" or "label" not in header:
            raise DatasetError("header must be id,p_0,...,p_{K-1},label[,group.<name>...]", 0)
        label_col = header.index("label")
        prob_cols = header[1:label_col]
        if prob_cols != [f"p_{i}" for i in range(len(prob_cols))] or len(prob_cols) < 2:
            raise DatasetError("probability columns must be p_0..p_{K-1} with K >= 2", 0)
        group_cols = header[label_col + 1:]
        bad = [g for g in group_cols if not g.startswith(_GROUP_PREFIX)]
        if bad:
            raise DatasetError(f"unexpected column {bad[0]!r}", 0)
        names = [g[len(_GROUP_PREFIX):] for g in group_cols]

        probs_rows, labels, ids = [], [], []
        groups = {n: [] for n in names}
        for row_no, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DatasetError(f"expected {len(header)} fields, got {len(row)}", row_no)
            ids.append(row[0])
            probs_rows.append([_parse_float(v, row_no, c) for v, c in zip(row[1:label_col], prob_cols)])
            labels.append(_parse_label(row[label_col], row_no))
            for n, v in zip(names, row[label_col + 1:]):
                prefix = f"{n}="
                groups[n].append(v[len(prefix):] if v.startswith(prefix) else v)
    return _build(probs_rows, labels, ids, groups)


def _load_json(path: Path) -> LabeledDataset:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed JSON: {exc}") from None
    if isinstance(doc, list):
        doc = {"records": doc}
    if not isinstance(doc, dict) or not isinstance(doc.get("records"), list):
        raise DatasetError("JSON dataset must be an object with a 'records' array")
    probs_rows, labels, ids = [], [], []
    group_rows = []
    for row_no, rec in enumerate(doc["records"], start=1):
        if not isinstance(rec, dict) or "label" not in rec:
            raise DatasetError("record must be an object with a label", row_no)
        if "probs" in rec:
            p = rec["probs"]
        else:
            keys = sorted((k for k in rec if k.startswith("p_")), key=lambda s: int(s[2:]))
            p = [rec[k] for k in keys]
        try:
            p = [float(v) for v in p]
        except (TypeError, ValueError):
            raise DatasetError("malformed probability vector", row_no) from None
        probs_rows.append(p)
        labels.append(_parse_label(rec["label"], row_no))
        ids.append(str(rec.get("id", row_no - 1)))
        g = dict(rec.get("groups", {}))
        g.update({k[len(_GROUP_PREFIX):]: v for k, v in rec.items() if k.startswith(_GROUP_PREFIX)})
        group_rows.append(g)
    names = sorted({n for g in group_rows for n in g})
    groups = {n: [str(g.get(n, "")) for g in group_rows] for n in names}
    taxonomy = doc.get("taxonomy")
    return _build(probs_rows, labels, ids, groups, class_names=doc.get("class_names"),
                  taxonomy=taxonomy, superclass_names=doc.get("superclass_names"))


def load_dataset(path, format: str | None = None) -> LabeledDataset:
    """Read a prediction file written in the CSV or JSON schema.

    ``format`` defaults to the file extension.  Raises :class:`DatasetError`
    (with the offending row number where applicable) on schema violations and
    ``FileNotFoundError`` when the file is missing.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "json":
        return _load_json(path)
    raise DatasetError(f"unknown dataset format {fmt!r}")


def write_dataset(ds: LabeledDataset, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    names = sorted(ds.groups)
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", *(f"p_{i}" for i in range(ds.k)), "label",
                        *(_GROUP_PREFIX + n for n in names)])
            for i in range(len(ds)):
                w.writerow([ds.ids[i], *(repr(float(p)) for p in ds.probs[i]), int(ds.labels[i]),
                            *(ds.groups[n][i] for n in names)])
    elif fmt == "json":
        doc = {"class_names": list(ds.class_names)}
        if ds.taxonomy is not None:
            doc["taxonomy"] = {str(c): s for c, s in sorted(ds.taxonomy.items())}
            doc["superclass_names"] = list(ds.superclass_names)
        doc["records"] = [
            {"id": ds.ids[i], "probs": [float(p) for p in ds.probs[i]], "label": int(ds.labels[i]),
             "groups": {n: ds.groups[n][i] for n in names}}
            for i in range(len(ds))
        ]
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")
    else:
        raise DatasetError(f"unknown dataset format {fmt!r}")


# --------------------------------------------------------------------------
# Splitting and resampling
# --------------------------------------------------------------------------

def _stratified_counts(class_counts: np.ndarray, size: int) -> np.ndarray:
    """Largest-remainder allocation of ``size`` draws proportional to class counts."""
    n = class_counts.sum()
    exact = class_counts * size / n
    alloc = np.floor(exact).astype(np.int64)
    remainder = size - alloc.sum()
    # ties in the fractional part go to the lower class index
    order = np.lexsort((np.arange(len(exact)), -(exact - alloc)))
    alloc[order[:remainder]] += 1
    return np.minimum(alloc, class_counts)


def split_indices(labels: np.ndarray, spec: SplitSpec, k: int | None = None):
    """Index form of :func:`split_dataset`; returns sorted (calibration, evaluation) indices."""
    n = len(labels)
    spec.validate(n)
    rng = np.random.default_rng(spec.seed)
    if spec.stratify_by_class:
        counts = np.bincount(labels, minlength=k or 0)
        alloc = _stratified_counts(counts, spec.calibration_size)
        # clipping to class size can leave a shortfall; refill from the largest leftovers
        short = spec.calibration_size - alloc.sum()
        if short:
            room = counts - alloc
            for c in np.argsort(-room, kind="stable")[:short]:
                alloc[c] += 1
        picked = []
        for c in range(len(counts)):
            members = np.flatnonzero(labels == c)
            picked.append(rng.permutation(members)[:alloc[c]])
        cal = np.sort(np.concatenate(picked))
    else:
        cal = np.sort(rng.permutation(n)[:spec.calibration_size])
    mask = np.ones(n, dtype=bool)
    mask[cal] = False
    return cal, np.flatnonzero(mask)


def split_dataset(ds: LabeledDataset, spec: SplitSpec) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint calibration/evaluation partition with exactly ``calibration_size`` calibration rows.

    Stratified mode allocates calibration slots per class by largest remainder,
    so class proportions are preserved up to rounding.
    """
    cal, ev = split_indices(ds.labels, spec, ds.k)
    return ds.subset(cal), ds.subset(ev)


def resample_indices(labels: np.ndarray, class_weights, size: int, seed: int, k: int) -> np.ndarray:
    w = np.asarray(class_weights, dtype=np.float64)
    if w.shape != (k,):
        raise DatasetError(f"expected {k} class weights, got {w.shape}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise DatasetError("class weights must be finite and nonnegative")
    if size < 1:
        raise DatasetError("resample size must be positive")
    counts = np.bincount(labels, minlength=k)
    empty = np.flatnonzero((w > 0) & (counts == 0))
    if empty.size:
        raise DatasetError(f"positive weight on empty class {int(empty[0])}")
    per_record = w[labels]
    total = per_record.sum()
    if total <= 0:
        raise DatasetError("class weights put no mass on any record")
    rng = np.random.default_rng(seed)
    return rng.choice(len(labels), size=size, replace=True, p=per_record / total)


def resample_weighted(ds: LabeledDataset, class_weights, size: int, seed: int) -> LabeledDataset:
    """Draw ``size`` records with replacement, each with probability proportional to its class weight.

    Drawn records get ids ``"<original id>@<draw index>"`` so the output keeps unique ids.
    """
    idx = resample_indices(ds.labels, class_weights, size, seed, ds.k)
    out = ds.subset(idx)
    ids = [f"{ds.ids[j]}@{i}" for i, j in enumerate(idx)]
    return LabeledDataset(probs=out.probs, labels=out.labels, ids=ids, groups=out.groups,
                          class_names=ds.class_names, taxonomy=ds.taxonomy,
                          superclass_names=ds.superclass_names)


def concat(datasets: Iterable[LabeledDataset]) -> LabeledDataset:
    datasets = list(datasets)
    first = datasets[0]
    names = sorted(first.groups)
    return LabeledDataset(
        probs=np.concatenate([d.probs for d in datasets]),
        labels=np.concatenate([d.labels for d in datasets]),
        ids=np.concatenate([d.ids for d in datasets]),
        groups={n: np.concatenate([d.groups[n] for d in datasets]) for n in names},
        class_names=first.class_names, taxonomy=first.taxonomy,
        superclass_names=first.superclass_names,
    )


def binomial_se(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n) if n > 0 else float("nan")
