"""Figures for a finished run, rendered off-screen to PNG files."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .stmap import CATEGORIES  # noqa: E402


def metric_grid(rows, category, column="f1"):
    """(T values, t values, matrix) with NaN where t > T."""
    col = {"precision": 3, "recall": 4, "f1": 5}[column]
    sel = [r for r in rows if r[2] == category]
    Ts = sorted({r[0] for r in sel})
    ts = sorted({r[1] for r in sel})
    M = np.full((len(Ts), len(ts)), np.nan)
    for r in sel:
        M[Ts.index(r[0]), ts.index(r[1])] = r[col]
    return Ts, ts, M


def plot_metric_surfaces(rows, path, column="f1"):
    fig, axes = plt.subplots(1, len(CATEGORIES), figsize=(4 * len(CATEGORIES), 3.6), constrained_layout=True)
    for ax, cat in zip(axes, CATEGORIES):
        Ts, ts, M = metric_grid(rows, cat, column)
        if not Ts:
            ax.set_axis_off()
            continue
        im = ax.imshow(M, origin="lower", vmin=0, vmax=1, cmap="viridis", aspect="auto",
                       extent=[ts[0] - 2.5, ts[-1] + 2.5, Ts[0] - 2.5, Ts[-1] + 2.5])
        ax.set_title(f"{cat} {column}")
        ax.set_xlabel("query time t [s]")
        ax.set_ylabel("belief time T [s]")
    fig.colorbar(im, ax=axes, shrink=0.8)
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_trajectory(scn, graph, path, fragments=()):
    fig, ax = plt.subplots(figsize=(6, 6))
    bg = scn.background
    if bg is not None:
        pts = bg.world_points(0.0)
        ax.scatter(pts[::7, 0], pts[::7, 1], s=0.2, c="0.75")
    ax.plot(scn.gt_positions[:, 0], scn.gt_positions[:, 1], "k-", lw=1, label="ground truth")
    if graph is not None and graph.robot_nodes:
        est = np.array([graph.nodes[n].estimate.translation for _, n in graph.robot_nodes])
        ax.plot(est[:, 0], est[:, 1], "C1-", lw=1, label="estimate")
    for f in fragments:
        c = np.asarray(f.surface).mean(axis=0)
        ax.plot(c[0], c[1], "C2x" if f.dynamic else "C0o", ms=4)
    ax.set_aspect("equal")
    ax.legend(loc="upper right")
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_timing(timing, path):
    fig, ax = plt.subplots(figsize=(7, 3))
    t = [r["t"] for r in timing]
    for key in ("frame_ms", "optimize_ms", "ray_query_ms", "reconcile_ms"):
        ax.plot(t, [r[key] for r in timing], lw=0.8, label=key)
    ax.set_yscale("symlog")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("ms")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_run(result, scn, out_dir):
    out = Path(out_dir)
    plot_metric_surfaces(result.metrics, out / "f1_surfaces.png")
    plot_trajectory(scn, result.graph, out / "trajectory.png", result.fragments)
    if result.timing:
        plot_timing(result.timing, out / "timing.png")
