"""Render report curves to image files.

Figures are drawn from the same tidy rows that are written to CSV, so a
figure never shows anything the delimited output does not contain.  Uses the
object-oriented matplotlib API with the Agg canvas: no pyplot state and no
display is touched.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Mapping, Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

_RC = {"dpi": 120}


def _new(width: float = 5.0, height: float = 4.0):
    fig = Figure(figsize=(width, height), dpi=_RC["dpi"])
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # no Software/date metadata so identical inputs give identical files
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    return path


def _series(rows: Sequence[Mapping], key: str, x: str, y: str) -> dict:
    out = defaultdict(list)
    for r in rows:
        out[r[key]].append((float(r[x]), float(r[y])))
    return {k: sorted(v) for k, v in out.items()}


def coverage_figure(rows: Sequence[Mapping], path, series_key: str, title: str = "") -> Path:
    """Empirical against target coverage, one line per value of ``series_key``."""
    fig, ax = _new()
    targets = sorted({float(r["target"]) for r in rows})
    ax.plot(targets, targets, ls=":", color="0.4", label="ideal")
    for name, pts in _series(rows, series_key, "target", "coverage").items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, lw=2.2 if name == "marginal" else 1.2, label=str(name))
    ax.set_xlabel("target coverage")
    ax.set_ylabel("empirical coverage")
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def selective_figure(rows: Sequence[Mapping], path, title: str = "") -> Path:
    fig, ax = _new()
    if rows and "delta" in rows[0]:
        groups = _series(rows, "delta", "rejection", "lcb")
    else:
        groups = {"": sorted((float(r["rejection"]), float(r["lcb"])) for r in rows)}
    for delta, pts in groups.items():
        xs, ys = zip(*pts)
        ax.plot(xs, ys, label=f"delta={delta}" if delta != "" else "lower bound")
    if rows and "acc" in rows[0]:
        pts = sorted((float(r["rejection"]), float(r["acc"])) for r in rows if r["acc"] == r["acc"])
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, ls="--", color="0.3", label="empirical accuracy")
    ax.set_xlabel("rejection fraction")
    ax.set_ylabel("guaranteed accuracy")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def efficiency_figure(rows: Sequence[Mapping], path, title: str = "") -> Path:
    fig, ax = _new()
    xs = [float(r["target"]) for r in rows]
    ax.plot(xs, [float(r["frac_singleton"]) for r in rows], label="singleton sets")
    if rows and rows[0].get("informativeness") not in (None, ""):
        ax.plot(xs, [float(r["informativeness"]) for r in rows], label="single superclass")
    ax.set_xlabel("target coverage")
    ax.set_ylabel("fraction of predictions")
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    ax.legend(fontsize=7)
    return _save(fig, path)


def pitfall_figures(bundle: Mapping, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    made = []
    reports = bundle["reports"]
    if "conditional-coverage" in reports:
        made.append(coverage_figure(reports["conditional-coverage"]["curve"],
                                    out_dir / "conditional-coverage.png", "stratum", "per-class coverage"))
    if "label-shift" in reports:
        made.append(coverage_figure(reports["label-shift"]["curve"], out_dir / "label-shift.png",
                                    "condition", "coverage under label shift"))
    if "selective" in reports:
        made.append(selective_figure(reports["selective"]["curve"], out_dir / "selective.png",
                                     "selective accuracy bound"))
    if "few-classes" in reports:
        made.append(efficiency_figure(reports["few-classes"]["curve"], out_dir / "few-classes.png",
                                      "efficiency"))
    return made
