"""Report figures written next to the line-delimited output.

Figures are built with the object-oriented API (no pyplot state), so
rendering is safe from worker processes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .pose import Trajectory

COLORS = {"truth": "#0072B2", "estimate": "#D55E00", "fixed": "#009E73", "flag": "#CC79A7", "grid": "#BBBBBB"}
STYLE = {"font.size": 8, "axes.titlesize": 9, "axes.labelsize": 8, "legend.fontsize": 7}
DPI = 120


def _figure(nrows: int = 1, ncols: int = 1, size=(7.0, 3.0)):
    fig = Figure(figsize=size, dpi=DPI, layout="constrained")
    FigureCanvasAgg(fig)
    axes = fig.subplots(nrows, ncols, squeeze=False)
    for ax in axes.flat:
        ax.grid(True, color=COLORS["grid"], linewidth=0.4, alpha=0.6)
        ax.tick_params(labelsize=STYLE["font.size"])
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def _shade_runs(ax, runs: Sequence[tuple[int, int]], color=COLORS["flag"], label="flagged"):
    for k, (a, b) in enumerate(runs):
        ax.axvspan(a - 0.5, b + 0.5, color=color, alpha=0.25, lw=0, label=label if k == 0 else None)


def plot_check(traj: Trajectory, scores: dict, runs, threshold: float, path, title: str = "") -> Path:
    """MAD scores per transition against the threshold, with flagged runs shaded."""
    fig, axes = _figure(2, 1, (7.0, 4.2))
    x = np.arange(len(traj) - 1)
    ax = axes[0, 0]
    for key in ("translation_spike", "rotation_jump", "smoothness"):
        if key in scores:
            ax.plot(x, np.nan_to_num(scores[key]), lw=1.0, label=key.replace("_", " "))
    ax.axhline(threshold, color="k", ls="--", lw=0.8, label="threshold")
    _shade_runs(ax, runs)
    ax.set_yscale("symlog", linthresh=threshold)
    ax.set_ylabel("MAD score")
    ax.set_title(title or "kinematic diagnostics")
    ax.legend(loc="upper right", ncol=3)
    ax = axes[1, 0]
    c = traj.centers()
    ax.plot(c[:, 0], c[:, 1], "-o", ms=2, lw=0.8, color=COLORS["estimate"])
    for a, b in runs:
        ax.plot(c[a:b + 2, 0], c[a:b + 2, 1], "-", lw=2.0, color=COLORS["flag"])
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    return _save(fig, path)


def plot_repair(before: Trajectory, after: Trajectory | None, runs, path, truth: Trajectory | None = None,
                title: str = "") -> Path:
    """Top-down view of the estimate and its repaired version."""
    fig, axes = _figure(1, 1, (5.0, 4.0))
    ax = axes[0, 0]
    if truth is not None:
        ct = truth.centers()
        ax.plot(ct[:, 0], ct[:, 1], "-", lw=2.5, alpha=0.4, color=COLORS["truth"], label="truth")
    cb = before.centers()
    ax.plot(cb[:, 0], cb[:, 1], "-o", ms=2, lw=0.8, color=COLORS["estimate"], label="estimate")
    if after is not None:
        ca = after.centers()
        ax.plot(ca[:, 0], ca[:, 1], "-", lw=1.2, color=COLORS["fixed"], label="repaired")
        for a, b in runs:
            ax.plot(ca[a:b + 2, 0], ca[a:b + 2, 1], "o", ms=4, color=COLORS["fixed"])
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_title(title or "repair")
    ax.legend(loc="best")
    return _save(fig, path)


def plot_windows(records: Sequence[dict], path, title: str = "") -> Path:
    """Clip spans and their sampled memory windows on a shared time axis."""
    fig, axes = _figure(1, 1, (7.0, 0.6 + 0.25 * max(len(records), 1)))
    ax = axes[0, 0]
    for k, r in enumerate(records):
        color = COLORS["fixed"] if r.get("kept", True) else COLORS["grid"]
        ax.plot([r["t0"], r["t1"]], [k, k], lw=4, color=color, solid_capstyle="butt")
        ax.plot([r["k_s"], r["k_e"]], [k + 0.3, k + 0.3], lw=2, color=COLORS["estimate"], solid_capstyle="butt")
    ax.set_xlabel("pose step")
    ax.set_ylabel("clip")
    ax.set_title(title or "clips (thick) and memory windows (thin)")
    return _save(fig, path)


def plot_metrics(gt: Trajectory, pred: Trajectory, combined_errors, path, title: str = "") -> Path:
    """Normalized trajectories side by side with per-frame combined error."""
    from .metrics import normalized_arrays

    fig, axes = _figure(1, 2, (8.0, 3.2))
    _, cg = normalized_arrays(gt)
    _, cp = normalized_arrays(pred)
    ax = axes[0, 0]
    ax.plot(cg[:, 0], cg[:, 2], "-", color=COLORS["truth"], label="reference")
    ax.plot(cp[:, 0], cp[:, 2], "-", color=COLORS["estimate"], label="prediction")
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x (frame 0)")
    ax.set_ylabel("z (frame 0)")
    ax.legend(loc="best")
    ax = axes[0, 1]
    ax.plot(gt.time_steps, combined_errors, "-o", ms=2, color=COLORS["estimate"])
    for tau in (15, 30):
        ax.axhline(tau, color="k", ls=":", lw=0.8)
    ax.set_xlabel("pose step")
    ax.set_ylabel("combined error (deg)")
    fig.suptitle(title or "trajectory following", fontsize=STYLE["axes.titlesize"])
    return _save(fig, path)
