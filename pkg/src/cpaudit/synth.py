"""Seeded synthetic classifier outputs.

Each record's probability vector is a Dirichlet draw whose parameter is 1 on
every class plus ``concentration`` (times any group multipliers) on the true
class.  Larger concentrations give a more accurate and more confident model;
a group multiplier below 1 makes that subgroup harder.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import LabeledDataset


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GroupSpec:
    name: str
    categories: tuple[str, ...]
    probs: tuple[float, ...]
    multipliers: tuple[float, ...]

    def __post_init__(self):
        for f in ("categories", "probs", "multipliers"):
            object.__setattr__(self, f, tuple(getattr(self, f)))
        m = len(self.categories)
        if m == 0 or len(self.probs) != m or len(self.multipliers) != m:
            raise SynthConfigError(f"group {self.name!r}: categories, probs and multipliers must align")
        _check_simplex(self.probs, f"group {self.name!r} probs")
        if any(not x > 0 for x in self.multipliers):
            raise SynthConfigError(f"group {self.name!r}: multipliers must be positive")


def _check_simplex(p, what):
    p = np.asarray(p, dtype=np.float64)
    if np.any(~np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise SynthConfigError(f"{what} must be a probability vector, got {p.tolist()}")


@dataclass(frozen=True)
class SynthConfig:
    n: int
    k: int
    class_priors: tuple[float, ...] | None = None
    concentration: float | tuple[float, ...] = 5.0
    group_specs: tuple[GroupSpec, ...] = ()
    seed: int = 0
    class_names: tuple[str, ...] | None = None
    taxonomy: Mapping[int, int] | None = None
    superclass_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n < 1 or self.k < 2:
            raise SynthConfigError(f"need n >= 1 and k >= 2, got n={self.n}, k={self.k}")
        priors = (tuple([1.0 / self.k] * self.k) if self.class_priors is None
                  else tuple(float(p) for p in self.class_priors))
        if len(priors) != self.k:
            raise SynthConfigError(f"class_priors has {len(priors)} entries, expected {self.k}")
        _check_simplex(priors, "class_priors")
        object.__setattr__(self, "class_priors", priors)
        conc = np.broadcast_to(np.asarray(self.concentration, dtype=np.float64), (self.k,))
        if np.any(~np.isfinite(conc)) or np.any(conc <= 0):
            raise SynthConfigError("concentration must be positive")
        object.__setattr__(self, "concentration", tuple(conc.tolist()))
        for f in ("class_names", "superclass_names"):
            if getattr(self, f) is not None:
                object.__setattr__(self, f, tuple(str(x) for x in getattr(self, f)))
        object.__setattr__(self, "group_specs", tuple(
            g if isinstance(g, GroupSpec) else GroupSpec(**g) for g in self.group_specs))

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SynthConfigError(f"unknown config field(s): {sorted(unknown)}")
        if d.get("taxonomy") is not None:
            d["taxonomy"] = {int(k): int(v) for k, v in d["taxonomy"].items()}
        try:
            return cls(**d)
        except TypeError as exc:
            raise SynthConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.taxonomy is not None:
            d["taxonomy"] = {str(k): v for k, v in sorted(self.taxonomy.items())}
        return json.loads(json.dumps(d))


def generate(cfg: SynthConfig) -> LabeledDataset:
    """Draw a dataset; the output is a pure function of ``cfg`` (including its seed)."""
    rng = np.random.default_rng(cfg.seed)
    labels = rng.choice(cfg.k, size=cfg.n, p=np.asarray(cfg.class_priors))
    mult = np.ones(cfg.n)
    groups = {}
    for g in cfg.group_specs:
        idx = rng.choice(len(g.categories), size=cfg.n, p=np.asarray(g.probs))
        groups[g.name] = np.asarray(g.categories, dtype=object)[idx]
        mult *= np.asarray(g.multipliers)[idx]
    shape = np.ones((cfg.n, cfg.k))
    shape[np.arange(cfg.n), labels] += np.asarray(cfg.concentration)[labels] * mult
    # Dirichlet rows via normalised gammas: numpy's dirichlet() takes one parameter vector only
    gam = rng.standard_gamma(shape)
    probs = gam / gam.sum(axis=1, keepdims=True)
    width = len(str(cfg.n - 1))
    return LabeledDataset(probs=probs, labels=labels, ids=[f"s{i:0{width}d}" for i in range(cfg.n)],
                          groups=groups, class_names=cfg.class_names, taxonomy=cfg.taxonomy,
                          superclass_names=cfg.superclass_names)


def ham_like(n: int = 5500, seed: int = 0, concentration: float | Sequence[float] = 3.0,
             class_priors: Sequence[float] | None = None, **kw) -> SynthConfig:
    """Seven-class skin-lesion-style config with a benign/malignant taxonomy."""
    names = ("actinic_keratosis", "basal_cell_carcinoma", "benign_keratosis", "dermatofibroma",
             "melanoma", "nevus", "vascular_lesion")
    taxonomy = {0: 1, 1: 1, 2: 0, 3: 0, 4: 1, 5: 0, 6: 0}
    return SynthConfig(n=n, k=7, class_priors=class_priors, concentration=concentration, seed=seed,
                       class_names=names, taxonomy=taxonomy, superclass_names=("benign", "malignant"),
                       **kw)
