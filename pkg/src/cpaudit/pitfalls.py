"""Canned demonstrations of conformal prediction pitfalls on synthetic classifiers.

Each demonstration returns a JSON-ready dict with a ``verdict`` of ``"PASS"``
(the pitfall and, where applicable, its mitigation were reproduced) or
``"FAIL"``, the checks behind it, summary statistics over the Monte Carlo
trials, and tidy curve rows for plotting.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

from .audit import calibration_curve, coverage_report, default_targets, efficiency_curve, sweep_memberships
from .conformal import ScoreConfig, calibrate_dataset, dataset_membership
from .core import LabeledDataset, SplitSpec, split_dataset, split_indices
from .selective import SelectiveConfig, choose_lambda, selective_curve, size_one_misuse_demo
from .shift import (LABEL_SHIFT, SCORE_SHIFT, ShiftSpec, adversarial_target, apply_shift,
                    shift_experiment)
from .synth import GroupSpec, SynthConfig, generate, ham_like

NAMES = ("conditional-coverage", "label-shift", "selective", "few-classes")

MELANOMA = 4

# per-class coverage: rare, hard melanoma class plus a small harder subgroup
def imbalanced_config(seed: int, n: int = 6000) -> SynthConfig:
    priors = [0.97 / 6] * 7
    priors[MELANOMA] = 0.03
    conc = [2.0] * 7
    conc[MELANOMA] = 1.0
    skin = GroupSpec("skin_tone", ("light", "dark"), (0.9, 0.1), (1.0, 0.5))
    return ham_like(n=n, seed=seed, concentration=tuple(conc), class_priors=tuple(priors),
                    group_specs=(skin,))


# balanced classes, one of them hard: the target of the adversarial label shift
def shift_config(seed: int, n: int = 12000) -> SynthConfig:
    conc = [2.0] * 7
    conc[MELANOMA] = 1.0
    return ham_like(n=n, seed=seed, concentration=tuple(conc))


# easy and hard cases mixed, so confident predictions are much more accurate than the rest
def mixed_config(seed: int, n: int = 5500) -> SynthConfig:
    difficulty = GroupSpec("difficulty", ("easy", "hard"), (0.6, 0.4), (5.0, 0.5))
    return ham_like(n=n, seed=seed, concentration=2.0, group_specs=(difficulty,))


def binary_config(seed: int, n: int = 5500) -> SynthConfig:
    difficulty = GroupSpec("difficulty", ("easy", "hard"), (0.6, 0.4), (5.0, 0.5))
    return SynthConfig(n=n, k=2, class_priors=(0.7, 0.3), concentration=2.0, seed=seed,
                       class_names=("benign", "malignant"), group_specs=(difficulty,))


def trial_seeds(seed: int, trials: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(trials)]


def run_trials(fn: Callable[[int], dict], seeds: Sequence[int], n_jobs: int = 1) -> list:
    """Map ``fn`` over seeds; results always come back in seed order."""
    if n_jobs <= 1:
        return [fn(s) for s in seeds]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(fn, seeds))


def mean_se(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def in_band(mean: float, se: float, alpha: float, n_cal: int, slack: float | None = None) -> bool:
    """Whether a mean coverage lies in [1-alpha, 1-alpha + 1/(n_cal+1)], up to 3 standard errors."""
    upper = (1.0 - alpha) + (1.0 / (n_cal + 1) if slack is None else slack)
    return (1.0 - alpha) - 3 * se <= mean <= upper + 3 * se


def _verdict(checks: dict) -> str:
    return "PASS" if all(checks.values()) else "FAIL"


def _r(x: float) -> float:
    return float(round(x, 10))


# --------------------------------------------------------------------------

def conditional_coverage(seed: int = 0, alpha: float = 0.1, trials: int = 50, n_cal: int = 1000,
                         n_jobs: int = 1) -> dict:
    """Plain calibration under-covers a rare hard class and a hard minority group; Mondrian fixes both."""
    cfg = ScoreConfig(alpha=alpha)

    def trial(s):
        ds = generate(imbalanced_config(s))
        cal, ev = split_dataset(ds, SplitSpec(n_cal, s, stratify_by_class=True))
        plain = coverage_report(dataset_membership(ev, calibrate_dataset(cal, cfg)), ev)
        by_class = coverage_report(dataset_membership(ev, calibrate_dataset(cal, cfg, "class")), ev)
        by_group = coverage_report(dataset_membership(ev, calibrate_dataset(cal, cfg, "group:skin_tone")), ev)
        return {
            "marginal": plain.marginal.rate,
            "per_class": [plain.per_class[c].rate for c in range(ds.k)],
            "mondrian_class": [by_class.per_class[c].rate for c in range(ds.k)],
            "group": {g: plain.per_group[f"skin_tone={g}"].rate for g in ("light", "dark")},
            "mondrian_group": {g: by_group.per_group[f"skin_tone={g}"].rate for g in ("light", "dark")},
        }

    res = run_trials(trial, trial_seeds(seed, trials), n_jobs)
    marg, marg_se = mean_se([r["marginal"] for r in res])
    per_class = np.array([r["per_class"] for r in res])
    mond = np.array([r["mondrian_class"] for r in res])
    cls_mean, cls_se = per_class.mean(0), per_class.std(0, ddof=1) / math.sqrt(trials)
    mond_mean, mond_se = mond.mean(0), mond.std(0, ddof=1) / math.sqrt(trials)
    dark, _ = mean_se([r["group"]["dark"] for r in res])
    dark_fixed, dark_fixed_se = mean_se([r["mondrian_group"]["dark"] for r in res])
    rare_gap = marg - cls_mean[MELANOMA]
    checks = {
        "marginal_in_band": in_band(marg, marg_se, alpha, n_cal),
        "rare_class_undercovered_by_0.05": bool(rare_gap >= 0.05),
        "mondrian_class_restores_every_class": bool(np.all(mond_mean >= (1 - alpha) - 3 * mond_se)),
        "mondrian_group_restores_minority": bool(dark_fixed >= (1 - alpha) - 3 * dark_fixed_se),
    }

    ds = generate(imbalanced_config(seed))
    cal, ev = split_dataset(ds, SplitSpec(n_cal, seed, stratify_by_class=True))
    curve = []
    for target, member in sweep_memberships(cal, ev, 1 - default_targets(ev.accuracy(), 25), cfg):
        covered = member[np.arange(len(ev)), ev.labels]
        curve.append({"target": _r(target), "stratum": "marginal", "coverage": _r(covered.mean())})
        for c in range(ev.k):
            curve.append({"target": _r(target), "stratum": ev.class_names[c],
                          "coverage": _r(covered[ev.labels == c].mean())})
    return {
        "pitfall": "marginal coverage hides under-covered classes and subgroups",
        "verdict": _verdict(checks),
        "checks": checks,
        "alpha": alpha,
        "trials": trials,
        "summary": {
            "n_cal": n_cal,
            "marginal_coverage": _r(marg),
            "marginal_se": _r(marg_se),
            "per_class_coverage": {ds.class_names[c]: _r(cls_mean[c]) for c in range(ds.k)},
            "rare_class": ds.class_names[MELANOMA],
            "rare_class_gap": _r(rare_gap),
            "mondrian_per_class_coverage": {ds.class_names[c]: _r(mond_mean[c]) for c in range(ds.k)},
            "mondrian_per_class_se": {ds.class_names[c]: _r(mond_se[c]) for c in range(ds.k)},
            "minority_group_coverage": _r(dark),
            "minority_group_coverage_mondrian": _r(dark_fixed),
        },
        "curve": curve,
    }


def label_shift(seed: int = 0, alpha: float = 0.1, trials: int = 50, n_cal: int = 1000,
                n_recal: int = 1000, shifted_size: int = 6000, n_jobs: int = 1) -> dict:
    """Coverage breaks under label and score shift and is restored by recalibration or reweighting."""
    cfg = ScoreConfig(alpha=alpha)

    def setup(s):
        ds = generate(shift_config(s))
        cal, ev = split_dataset(ds, SplitSpec(n_cal, s))
        report = coverage_report(dataset_membership(ev, calibrate_dataset(cal, cfg)), ev)
        target = adversarial_target(ev, {c: v.rate for c, v in report.per_class.items()})
        return cal, ev, ShiftSpec(LABEL_SHIFT, tuple(target), seed=s, size=shifted_size)

    def trial(s):
        cal, ev, spec = setup(s)
        lab = shift_experiment(cal, ev, spec, cfg, n_recal, s)
        dom = shift_experiment(cal, ev, ShiftSpec(SCORE_SHIFT, temperature=1.0, noise_scale=1.0, seed=s),
                               cfg, n_recal, s)
        w = np.asarray(spec.target) / cal.class_distribution()
        return {"before": lab.coverage_before, "label_shift": lab.coverage_after_shift,
                "recalibrated": lab.coverage_after_recalibration, "weighted": lab.coverage_weighted,
                "weight_slack": float(w.max() / (w[cal.labels].sum() + w.max())),
                "score_shift": dom.coverage_after_shift,
                "score_shift_recalibrated": dom.coverage_after_recalibration}

    res = run_trials(trial, trial_seeds(seed, trials), n_jobs)
    stats = {k: mean_se([r[k] for r in res]) for k in res[0] if k != "weight_slack"}
    slack = max(r["weight_slack"] for r in res)
    checks = {
        "coverage_before_in_band": in_band(*stats["before"], alpha, n_cal),
        "label_shift_drops_by_0.02": bool(stats["label_shift"][0] <= (1 - alpha) - 0.02),
        "recalibration_restores": in_band(*stats["recalibrated"], alpha, n_recal),
        "weighting_restores": in_band(*stats["weighted"], alpha, n_cal, slack=slack),
        "score_shift_drops_by_0.02": bool(stats["score_shift"][0] <= (1 - alpha) - 0.02),
    }

    cal, ev, spec = setup(seed)
    shifted = apply_shift(ev, spec)
    recal_idx, hold_idx = split_indices(shifted.labels, SplitSpec(n_recal, seed), shifted.k)
    alphas = 1 - default_targets(ev.accuracy(), 25)
    curve = []
    for cond, c, e in (("test", cal, ev),
                       ("label_shift", cal, shifted.subset(hold_idx)),
                       ("label_shift_recalibrated", shifted.subset(recal_idx), shifted.subset(hold_idx))):
        for p in calibration_curve(c, e, alphas, cfg).points:
            curve.append({"target": _r(p.target), "condition": cond, "coverage": _r(p.empirical)})
    return {
        "pitfall": "coverage guarantees break under label or input shift",
        "verdict": _verdict(checks),
        "checks": checks,
        "alpha": alpha,
        "trials": trials,
        "summary": {
            **{f"coverage_{k}": _r(m) for k, (m, _) in stats.items()},
            **{f"se_{k}": _r(se) for k, (_, se) in stats.items()},
            "adversarial_target": [_r(t) for t in spec.target],
            "n_cal": n_cal,
            "n_recal": n_recal,
            "weighted_band_slack": _r(slack),
        },
        "curve": curve,
    }


def selective(seed: int = 0, alpha: float = 0.1, trials: int = 50, n_cal: int = 500,
              deltas: Sequence[float] = (0.01, 0.05, 0.1, 0.5), target_accuracy: float = 0.9,
              n_jobs: int = 1) -> dict:
    """Singleton sets are over-covered but uncontrolled; confidence thresholding certifies accuracy."""
    cfg = ScoreConfig(alpha=alpha)

    def trial(s):
        ds = generate(mixed_config(s))
        cal, ev = split_dataset(ds, SplitSpec(n_cal, s))
        report = coverage_report(dataset_membership(ev, calibrate_dataset(cal, cfg)), ev)
        size1 = report.per_set_size.get(1)
        return {"marginal": report.marginal.rate,
                "size1": size1.rate if size1 else float("nan"),
                "singleton_fraction": report.efficiency.frac_singleton}

    res = run_trials(trial, trial_seeds(seed, trials), n_jobs)
    diff, diff_se = mean_se([r["size1"] - r["marginal"] for r in res])
    single_frac, _ = mean_se([r["singleton_fraction"] for r in res])

    ds = generate(mixed_config(seed))
    cal, ev = split_dataset(ds, SplitSpec(n_cal, seed))
    curve = []
    collapses = True
    for d in deltas:
        sc = selective_curve(cal, SelectiveConfig(delta=d))
        for p in sc.points:
            curve.append({"delta": d, "lambda": _r(p.lam), "rejection": _r(p.rejection_fraction),
                          "n_kept": p.n_kept, "lcb": _r(p.lower_bound)})
        bounds = [p.lower_bound for p in sc.points]
        # one correct kept record has bound 1 - sqrt(ln(1/delta)/2), which is 0 once delta <= e^-2
        floor = 0.0 if d <= math.exp(-2) else max(bounds)
        collapses &= bool(max(bounds) > bounds[0] and bounds[-1] <= floor and bounds[-1] < max(bounds))
    choice = choose_lambda(cal, SelectiveConfig(delta=0.1, target_accuracy=target_accuracy))
    misuse = size_one_misuse_demo(ds, cfg)
    checks = {
        "size1_overcovered": bool(diff > 3 * diff_se),
        "bound_rises_then_collapses": collapses,
    }
    return {
        "pitfall": "keeping singleton sets is not selective classification",
        "verdict": _verdict(checks),
        "checks": checks,
        "alpha": alpha,
        "trials": trials,
        "summary": {
            "size1_minus_marginal": _r(diff),
            "size1_minus_marginal_se": _r(diff_se),
            "singleton_fraction": _r(single_frac),
            "certified": None if choice is None else {
                "lambda": _r(choice.lam), "target_accuracy": target_accuracy, "delta": 0.1,
                "lower_bound": _r(choice.lower_bound), "rejection_fraction": _r(choice.rejection_fraction)},
            "misuse": {"singleton_accuracy_monotone": misuse.singleton_accuracy_monotone,
                       "rows": [{k: _r(v) for k, v in r.__dict__.items()} for r in misuse.rows]},
        },
        "curve": curve,
    }


def few_classes(seed: int = 0, alpha: float = 0.1, trials: int = 20, n_cal: int = 500,
                probe_target: float = 0.95, n_jobs: int = 1) -> dict:
    """Set-valued outputs carry little decision value when there are few (super)classes."""
    cfg = ScoreConfig(alpha=alpha)

    def trial(s):
        ds = generate(mixed_config(s))
        cal, ev = split_dataset(ds, SplitSpec(n_cal, s))
        alphas = 1 - np.append(default_targets(ev.accuracy(), 50), probe_target)
        pts = efficiency_curve(cal, ev, alphas, cfg)
        single = [p.frac_singleton for p in pts]
        info = [p.informativeness for p in pts]
        monotone = all(a >= b for a, b in zip(single, single[1:])) and all(
            a >= b for a, b in zip(info, info[1:]))
        probe = next(p for p in pts if abs(p.target - probe_target) < 1e-9)
        b = generate(binary_config(s))
        bcal, bev = split_dataset(b, SplitSpec(n_cal, s))
        sizes = dataset_membership(bev, calibrate_dataset(bcal, cfg)).sum(axis=1)
        return {"monotone": monotone, "informativeness": probe.informativeness,
                "frac_singleton": probe.frac_singleton,
                "binary_sizes": sorted(set(sizes.tolist())),
                "binary_full_fraction": float(np.mean(sizes == 2))}

    res = run_trials(trial, trial_seeds(seed, trials), n_jobs)
    info, info_se = mean_se([r["informativeness"] for r in res])
    checks = {
        "efficiency_non_increasing": all(r["monotone"] for r in res),
        "mostly_uninformative_at_probe": bool(info < 0.5),
        "binary_sets_only_size_1_or_2": all(set(r["binary_sizes"]) <= {1, 2} for r in res),
    }
    ds = generate(mixed_config(seed))
    cal, ev = split_dataset(ds, SplitSpec(n_cal, seed))
    curve = [{"target": _r(p.target), "frac_singleton": _r(p.frac_singleton), "mean_size": _r(p.mean_size),
              "informativeness": _r(p.informativeness)}
             for p in efficiency_curve(cal, ev, 1 - default_targets(ev.accuracy(), 50), cfg)]
    return {
        "pitfall": "few classes leave conformal sets with little practical value",
        "verdict": _verdict(checks),
        "checks": checks,
        "alpha": alpha,
        "trials": trials,
        "summary": {
            "probe_target": probe_target,
            "informativeness_at_probe": _r(info),
            "informativeness_se": _r(info_se),
            "frac_singleton_at_probe": _r(mean_se([r["frac_singleton"] for r in res])[0]),
            "binary_full_set_fraction": _r(mean_se([r["binary_full_fraction"] for r in res])[0]),
        },
        "curve": curve,
    }


DEMOS = {
    "conditional-coverage": conditional_coverage,
    "label-shift": label_shift,
    "selective": selective,
    "few-classes": few_classes,
}


def run_pitfalls(seed: int = 0, alpha: float = 0.1, only: Sequence[str] | None = None,
                 n_jobs: int = 1) -> dict:
    names = list(only) if only else list(NAMES)
    unknown = [n for n in names if n not in DEMOS]
    if unknown:
        raise ValueError(f"unknown pitfall {unknown[0]!r}; choose from {', '.join(NAMES)}")
    reports = {n: DEMOS[n](seed=seed, alpha=alpha, n_jobs=n_jobs) for n in names}
    return {"seed": seed, "alpha": alpha, "reports": reports,
            "verdicts": {n: r["verdict"] for n, r in reports.items()}}
