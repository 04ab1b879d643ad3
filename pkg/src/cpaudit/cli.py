"""Command-line entry point.

Every command writes its artifacts plus a ``*.manifest.json`` run manifest
recording the argv, resolved options, seeds, input digests and version.
Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .audit import (AuditError, calibration_curve, coverage_report, default_targets, efficiency_curve,
                    set_size_coverage, superclass_collapse, write_json, write_rows)
from .conformal import (CalibrationError, CalibrationResult, ScoreConfig, calibrate_dataset,
                        load_sets, predict_sets, save_sets)
from .core import DatasetError, SplitSpec, load_dataset, split_dataset, write_dataset
from .selective import SelectiveConfig, SelectiveError, choose_lambda, selective_curve
from .shift import ShiftError, ShiftSpec, label_shift_weights, shift_experiment
from .synth import SynthConfig, SynthConfigError, generate


class UsageError(Exception):
    pass


_VALIDATION_ERRORS = (UsageError, DatasetError, CalibrationError, AuditError, ShiftError,
                      SelectiveError, SynthConfigError, ValueError, KeyError, TypeError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs = {}
        self.outputs = []

    def read(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"no such file: {path}")
        self.inputs[str(path)] = _digest(path)
        return path

    def wrote(self, *paths):
        self.outputs += [str(p) for p in paths]

    def manifest(self, path):
        config = {k: (str(v) if isinstance(v, Path) else v)
                  for k, v in sorted(vars(self.args).items()) if k != "func"}
        doc = {
            "command": " ".join(c for c in (self.args.command, getattr(self.args, "audit_command", None)) if c),
            "argv": self.argv,
            "config": config,
            "seeds": {k: v for k, v in config.items() if k == "seed" or k.endswith("_seed")},
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": __version__,
            "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _manifest_path(out) -> Path:
    out = Path(out)
    if out.is_dir():
        return out / "manifest.json"
    return out.with_name(out.stem + ".manifest.json")


def _json_arg(value: str):
    """Inline JSON, or a path to a JSON file."""
    value = value.strip()
    if value.startswith(("{", "[")):
        return json.loads(value)
    return json.loads(Path(value).read_text(encoding="utf-8"))


def _score_cfg(args) -> ScoreConfig:
    return ScoreConfig(alpha=args.alpha, randomized=args.score == "randomized", seed=args.seed)


def _alphas(args, accuracy: float):
    if args.alpha_grid:
        return [float(a) for a in args.alpha_grid.split(",")]
    return 1.0 - default_targets(accuracy, args.grid_points)


def _with_suffix(path, suffix):
    path = Path(path)
    return path.with_suffix(suffix)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args, run: Run):
    cfg = _json_arg(args.config)
    if isinstance(args.config, str) and not args.config.strip().startswith("{"):
        run.read(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.n is not None:
        cfg["n"] = args.n
    ds = generate(SynthConfig.from_dict(cfg))
    write_dataset(ds, args.out, args.format)
    run.wrote(args.out)
    return args.out


def cmd_split(args, run: Run):
    ds = load_dataset(run.read(args.data))
    cal, ev = split_dataset(ds, SplitSpec(args.calibration_size, args.seed, args.stratify))
    fmt = args.format or Path(args.data).suffix.lstrip(".")
    write_dataset(cal, args.out_cal, fmt)
    write_dataset(ev, args.out_eval, fmt)
    run.wrote(args.out_cal, args.out_eval)
    return args.out_cal


def cmd_calibrate(args, run: Run):
    cal = load_dataset(run.read(args.cal))
    weights = None
    if args.target_distribution:
        weights = label_shift_weights(cal, _json_arg(args.target_distribution))
    result = calibrate_dataset(cal, _score_cfg(args), args.partition, class_weights=weights)
    result.save(args.out)
    run.wrote(args.out)
    return args.out


def cmd_predict(args, run: Run):
    calib = CalibrationResult.load(run.read(args.calib))
    ds = load_dataset(run.read(args.data))
    cfg = ScoreConfig(alpha=calib.alpha, randomized=calib.randomized, seed=args.seed)
    save_sets(predict_sets(ds, calib, cfg), args.out)
    run.wrote(args.out)
    return args.out


def cmd_audit_coverage(args, run: Run):
    sets = load_sets(run.read(args.sets))
    ds = load_dataset(run.read(args.data))
    report = coverage_report(sets, ds, args.alpha)
    js, cs = _with_suffix(args.out, ".json"), _with_suffix(args.out, ".csv")
    report.write(js, cs)
    run.wrote(js, cs)
    return js


def cmd_audit_set_size(args, run: Run):
    sets = load_sets(run.read(args.sets))
    ds = load_dataset(run.read(args.data))
    rates = set_size_coverage(sets, ds)
    rows = [{"set_size": k, "coverage": v} for k, v in rates.items()]
    write_rows(rows, args.out, ["set_size", "coverage"])
    run.wrote(args.out)
    return args.out


def cmd_audit_superclass(args, run: Run):
    sets = load_sets(run.read(args.sets))
    if args.taxonomy:
        taxonomy = {int(k): int(v) for k, v in _json_arg(args.taxonomy).items()}
    else:
        ds = load_dataset(run.read(args.data)) if args.data else None
        if ds is None or ds.taxonomy is None:
            raise UsageError("audit superclass needs --taxonomy or a --data file carrying a taxonomy")
        taxonomy = ds.taxonomy
    collapsed, info = superclass_collapse(sets, taxonomy)
    write_json({"informativeness": info, "n": len(collapsed),
                "sets": [{"id": s.record_id, "superclasses": list(c)} for s, c in zip(sets, collapsed)]},
               args.out)
    run.wrote(args.out)
    return args.out


def cmd_audit_curve(args, run: Run):
    cal = load_dataset(run.read(args.cal))
    ev = load_dataset(run.read(args.data))
    curve = calibration_curve(cal, ev, _alphas(args, cal.accuracy()), _score_cfg(args))
    write_rows(curve.rows(), args.out, ["target", "empirical", "mean_size"])
    run.wrote(args.out)
    if args.figures:
        from .plotting import coverage_figure
        rows = [{"target": r["target"], "coverage": r["empirical"], "series": "marginal"} for r in curve.rows()]
        run.wrote(coverage_figure(rows, _with_suffix(args.out, ".png"), "series", "calibration curve"))
    return args.out


def cmd_audit_efficiency(args, run: Run):
    cal = load_dataset(run.read(args.cal))
    ev = load_dataset(run.read(args.data))
    pts = efficiency_curve(cal, ev, _alphas(args, cal.accuracy()), _score_cfg(args))
    rows = [p.__dict__ for p in pts]
    write_rows(rows, args.out, ["target", "frac_singleton", "mean_size", "informativeness"])
    run.wrote(args.out)
    if args.figures:
        from .plotting import efficiency_figure
        run.wrote(efficiency_figure(rows, _with_suffix(args.out, ".png"), "efficiency"))
    return args.out


def cmd_shift(args, run: Run):
    cal = load_dataset(run.read(args.cal))
    ev = load_dataset(run.read(args.data))
    if not args.spec.strip().startswith("{"):
        run.read(args.spec)
    spec = ShiftSpec.from_dict(_json_arg(args.spec))
    result = shift_experiment(cal, ev, spec, _score_cfg(args), args.n_recal, args.seed)
    out = Path(args.out)
    write_json(result.to_dict(), out)
    run.wrote(out)
    for name, report in result.reports.items():
        js = out.with_name(f"{out.stem}.{name}.json")
        cs = out.with_name(f"{out.stem}.{name}.csv")
        report.write(js, cs)
        run.wrote(js, cs)
    return out


def cmd_selective(args, run: Run):
    ds = load_dataset(run.read(args.data))
    grid = None
    if args.grid:
        grid = tuple(sorted((float(x) for x in args.grid.split(",")), reverse=True))
    cfg = SelectiveConfig(delta=args.delta, target_accuracy=args.target_accuracy, grid=grid,
                          bound=args.bound)
    curve = selective_curve(ds, cfg)
    write_rows(curve.rows(), args.out, ["lambda", "rejection", "n_kept", "acc", "lcb"])
    run.wrote(args.out)
    if args.target_accuracy is not None:
        choice = choose_lambda(ds, cfg)
        cert = {"delta": args.delta, "target_accuracy": args.target_accuracy, "bound": args.bound,
                "certified": choice is not None,
                "choice": None if choice is None else choice.__dict__}
        js = _with_suffix(args.out, ".json")
        write_json(cert, js)
        run.wrote(js)
    if args.figures:
        from .plotting import selective_figure
        run.wrote(selective_figure(curve.rows(), _with_suffix(args.out, ".png"),
                                   f"selective accuracy (delta={args.delta})"))
    return args.out


def cmd_pitfalls(args, run: Run):
    from .pitfalls import run_pitfalls
    bundle = run_pitfalls(seed=args.seed, alpha=args.alpha, only=args.only, n_jobs=args.parallel_trials)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(bundle, out / "pitfalls.json")
    run.wrote(out / "pitfalls.json")
    for name, rep in bundle["reports"].items():
        write_rows(rep["curve"], out / f"{name}.csv")
        run.wrote(out / f"{name}.csv")
    if args.figures:
        from .plotting import pitfall_figures
        run.wrote(*pitfall_figures(bundle, out))
    for name, verdict in bundle["verdicts"].items():
        print(f"{verdict}  {name}: {bundle['reports'][name]['pitfall']}")
    return out


def cmd_replay(args, run: Run):
    doc = json.loads(run.read(args.manifest).read_text(encoding="utf-8"))
    for path, digest in doc.get("inputs", {}).items():
        if not Path(path).is_file():
            raise FileNotFoundError(f"manifest input missing: {path}")
        if _digest(path) != digest:
            raise UsageError(f"input {path} changed since the manifest was written")
    return main(doc["argv"])


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _common(p, alpha=True, score=True):
    if alpha:
        p.add_argument("--alpha", type=float, default=0.1, help="miscoverage level (default 0.1)")
    if score:
        p.add_argument("--score", choices=("deterministic", "randomized"), default="deterministic")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpaudit", description="Conformal prediction calibration and coverage audits.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic prediction dataset")
    p.add_argument("--config", required=True, help="SynthConfig JSON (inline or file)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--n", type=int, default=None, help="override the config size")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("csv", "json"), default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="split a dataset into calibration and evaluation parts")
    p.add_argument("--data", required=True)
    p.add_argument("--calibration-size", type=int, required=True)
    p.add_argument("--stratify", action="store_true", help="preserve class proportions")
    p.add_argument("--out-cal", required=True)
    p.add_argument("--out-eval", required=True)
    p.add_argument("--format", choices=("csv", "json"), default=None)
    _common(p, alpha=False, score=False)
    p.set_defaults(func=cmd_split, out=None)

    p = sub.add_parser("calibrate", help="find conformal thresholds on calibration data")
    p.add_argument("--cal", required=True)
    p.add_argument("--partition", default="none", help="none, class or group:<attr>")
    p.add_argument("--target-distribution", default=None,
                   help="label distribution (JSON list) to reweight calibration towards")
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("predict", help="build prediction sets")
    p.add_argument("--calib", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _common(p, alpha=False, score=False)
    p.set_defaults(func=cmd_predict)

    audit = sub.add_parser("audit", help="coverage and efficiency reports")
    asub = audit.add_subparsers(dest="audit_command", required=True, parser_class=_Parser)
    a = asub.add_parser("coverage", help="stratified coverage report (JSON + CSV)")
    a.add_argument("--sets", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--alpha", type=float, default=None)
    a.add_argument("--out", required=True, help="output path; .json and .csv are written")
    a.set_defaults(func=cmd_audit_coverage)
    a = asub.add_parser("set-size", help="coverage per prediction-set size (CSV)")
    a.add_argument("--sets", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_audit_set_size)
    a = asub.add_parser("superclass", help="collapse sets through a class taxonomy")
    a.add_argument("--sets", required=True)
    a.add_argument("--data", default=None)
    a.add_argument("--taxonomy", default=None, help="JSON map class -> superclass (inline or file)")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_audit_superclass)
    for name, func, what in (("curve", cmd_audit_curve, "empirical vs target coverage"),
                             ("efficiency", cmd_audit_efficiency, "singleton fraction vs target coverage")):
        a = asub.add_parser(name, help=f"{what} (CSV)")
        a.add_argument("--cal", required=True)
        a.add_argument("--data", required=True)
        a.add_argument("--alpha-grid", default=None, help="comma-separated alphas")
        a.add_argument("--grid-points", type=int, default=50)
        a.add_argument("--out", required=True)
        a.add_argument("--figures", action="store_true", help="also render a PNG next to the CSV")
        _common(a, alpha=False)
        a.set_defaults(func=func, alpha=0.1)

    p = sub.add_parser("shift", help="coverage before/after a shift and after recalibration")
    p.add_argument("--cal", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, help="ShiftSpec JSON (inline or file)")
    p.add_argument("--n-recal", type=int, default=1000)
    p.add_argument("--out", required=True)
    _common(p)
    p.set_defaults(func=cmd_shift)

    p = sub.add_parser("selective", help="selective accuracy curve and certified threshold")
    p.add_argument("--data", required=True)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--target-accuracy", type=float, default=None)
    p.add_argument("--bound", choices=("hoeffding", "clopper-pearson"), default="hoeffding")
    p.add_argument("--grid", default=None, help="comma-separated thresholds")
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action="store_true")
    p.set_defaults(func=cmd_selective)

    p = sub.add_parser("pitfalls", help="run the canned pitfall demonstrations")
    p.add_argument("--only", action="append", default=None,
                   choices=("conditional-coverage", "label-shift", "selective", "few-classes"))
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--parallel-trials", type=int, default=1)
    p.add_argument("--figures", action="store_true")
    _common(p, score=False)
    p.set_defaults(func=cmd_pitfalls)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay, out=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    run = None
    try:
        args = build_parser().parse_args(argv)
        run = Run(args, argv)
        result = args.func(args, run)
        if args.command == "replay":
            return result
        out = args.out if args.out is not None else args.out_cal
        run.manifest(_manifest_path(out))
        return 0
    except (OSError, json.JSONDecodeError) as exc:
        if isinstance(exc, json.JSONDecodeError):
            print(f"error: malformed JSON: {exc}", file=sys.stderr)
            return 1
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
