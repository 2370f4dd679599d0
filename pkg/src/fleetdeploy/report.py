"""Figure rendering for completed runs.

Renders the metric traces a deployment run produces to PNG files next to
the CSV/ndjson artifacts. The CSV stays the machine-readable contract;
these figures are for eyeballing a run without loading anything.
"""

import os

import numpy as np
from scipy.spatial import ConvexHull, QhullError

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def distance_figure(metrics, params, path):
    """Distance traces with the safety thresholds drawn as reference lines."""
    t = np.asarray(metrics.t, dtype=float)
    fig, axes = plt.subplots(3, 1, figsize=(8, 9), sharex=True)

    ax = axes[0]
    ax.plot(t, metrics.min_pair_dist, color="tab:blue", lw=1.2)
    ax.axhline(2 * params["r_a"], color="tab:red", ls="--", lw=1.0,
               label=f"2 r_a = {2 * params['r_a']:g}")
    ax.set_ylabel("min pairwise dist [m]")
    ax.legend(loc="upper right")

    ax = axes[1]
    finite = [d for d in metrics.min_los_obs_dist if d is not None and np.isfinite(d)]
    ax.plot(t[:len(metrics.min_los_obs_dist)],
            [d if (d is not None and np.isfinite(d)) else np.nan
             for d in metrics.min_los_obs_dist],
            color="tab:green", lw=1.2)
    ax.axhline(params["d_m"], color="tab:orange", ls="--", lw=1.0,
               label=f"d_m = {params['d_m']:g}")
    ax.axhline(0.0, color="tab:red", ls="--", lw=1.0, label="contact")
    if not finite:
        ax.text(0.5, 0.5, "no obstacles in range", transform=ax.transAxes,
                ha="center", va="center", color="gray")
    ax.set_ylabel("min LOS-obstacle dist [m]")
    ax.legend(loc="upper right")

    ax = axes[2]
    ax.plot(t, metrics.max_edge_dist, color="tab:purple", lw=1.2)
    ax.axhline(params["d_c"], color="tab:red", ls="--", lw=1.0,
               label=f"d_c = {params['d_c']:g}")
    ax.set_ylabel("max edge length [m]")
    ax.set_xlabel("time [s]")
    ax.legend(loc="lower right")

    fig.suptitle("Run safety margins")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def timing_figure(metrics, path):
    """Per-tick solve time split into constraint assembly and QCQP solve."""
    t = np.asarray(metrics.t, dtype=float)
    build = np.asarray(metrics.mean_constraint_ms, dtype=float)
    solve = np.asarray(metrics.mean_solve_ms, dtype=float)
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.stackplot(t, build, solve, labels=["constraint build", "solve"],
                 colors=["tab:cyan", "tab:blue"], alpha=0.85)
    total = build + solve
    ax.plot(t, total, color="black", lw=0.8)
    ax.set_xlabel("time [s]")
    ax.set_ylabel("mean per-agent time [ms]")
    ax.set_title(f"Planning time per agent per tick "
                 f"(mean {float(np.mean(total)):.1f} ms)")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def trajectory_figure(runlog, path):
    """Top-down (x, y) view of committed positions, obstacles, and targets."""
    header = runlog[0]
    scenario = header["scenario"]
    tracks = {}
    for line in runlog:
        if line.get("type") != "tick":
            continue
        for aid, st in line["agents"].items():
            tracks.setdefault(aid, []).append(st["p"])
    fig, ax = plt.subplots(figsize=(7, 7))
    for entry in scenario["obstacles"]:
        v = np.asarray(entry["vertices"], dtype=float)
        try:
            hull = ConvexHull(v[:, :2])
            poly = v[hull.vertices, :2]
        except QhullError:
            poly = v[:, :2]
        ax.fill(poly[:, 0], poly[:, 1], color="0.75", zorder=1)
    for aid, pts in sorted(tracks.items(), key=lambda kv: int(kv[0])):
        pts = np.asarray(pts, dtype=float)
        ax.plot(pts[:, 0], pts[:, 1], lw=1.0, label=f"agent {aid}")
    pg = scenario["p_g"]
    ax.plot([pg[0]], [pg[1]], marker="s", color="red", ms=9, zorder=5)
    for tgt in scenario["targets"]:
        ax.plot([tgt[0]], [tgt[1]], marker="D", color="magenta", ms=7, zorder=5)
    lo, hi = scenario["bounds"]
    ax.set_xlim(lo[0], hi[0])
    ax.set_ylim(lo[1], hi[1])
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("Committed trajectories (top view)")
    if len(tracks) <= 12:
        ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_run(result, out_dir):
    """Write the standard figure set for a RunResult; returns written paths."""
    params = result.runlog[0]["scenario"]["params"]
    paths = [
        distance_figure(result.metrics, params,
                        os.path.join(out_dir, "distances.png")),
        timing_figure(result.metrics, os.path.join(out_dir, "timing.png")),
        trajectory_figure(result.runlog, os.path.join(out_dir, "trajectories.png")),
    ]
    return paths
