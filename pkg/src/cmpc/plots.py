"""SVG figures rendered from a run log."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .simulate import RunLog

__all__ = ["plot_run"]


def plot_run(log: RunLog, out_dir: str | Path) -> list[Path]:
    """Write the standard set of run figures and return their paths.

    Produces planar trajectories with keep-out discs, per-output consensus
    traces, obstacle clearance with the zero line, cost and iteration counts
    over time. Angles are in radians.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = log.n_steps
    n = log.states.shape[1] if steps else 0
    t = np.arange(steps)
    written: list[Path] = []

    fig, ax = plt.subplots(figsize=(7, 5))
    for i in range(n):
        ax.plot(log.states[:, i, 0], log.states[:, i, 1], label=f"agent {i}")
        ax.plot(log.states[0, i, 0], log.states[0, i, 1], "o", ms=5, color="black")
    for obs in log.scenario.get("obstacles", []):
        circle = plt.Circle(obs["center"], obs["radius"], color="tab:red", alpha=0.3)
        ax.add_patch(circle)
    ax.set_xlabel("p_x")
    ax.set_ylabel("p_y")
    ax.set_title("Planar trajectories")
    ax.axis("equal")
    if n:
        ax.legend(loc="best", fontsize=8)
    written.append(_save(fig, out / "trajectories.svg"))

    names = ["p_x", "theta [rad]", "v"]
    fig, axes = plt.subplots(len(names), 1, figsize=(7, 8), sharex=True)
    for dim, (ax, name) in enumerate(zip(axes, names)):
        for i in range(n):
            ax.plot(t, log.outputs[:, i, dim], label=f"agent {i}")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    axes[-1].set_xlabel("t")
    axes[0].set_title("Output consensus")
    if n:
        axes[0].legend(loc="best", fontsize=8)
    written.append(_save(fig, out / "outputs.svg"))

    fig, ax = plt.subplots(figsize=(7, 4))
    n_obs = log.obstacle_margins.shape[2] if steps else 0
    for i in range(n):
        for o in range(n_obs):
            ax.plot(t, log.obstacle_margins[:, i, o], label=f"agent {i}, obstacle {o}")
    ax.axhline(0.0, color="black", lw=1.0)
    ax.set_xlabel("t")
    ax.set_ylabel("obstacle clearance")
    ax.set_title("Keep-out margin over time")
    if n and n_obs:
        ax.legend(loc="best", fontsize=8)
    written.append(_save(fig, out / "obstacle_margin.svg"))

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(t, log.cost, color="tab:blue")
    ax.set_xlabel("t")
    ax.set_ylabel("J")
    ax.set_title("Cost over time")
    ax.grid(alpha=0.3)
    written.append(_save(fig, out / "cost.svg"))

    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(t, log.sqp_iterations, drawstyle="steps-post", color="tab:green")
    ax.set_xlabel("t")
    ax.set_ylabel("iterations")
    ax.set_title("Convexification iterations per step")
    ax.grid(alpha=0.3)
    written.append(_save(fig, out / "iterations.svg"))

    return written


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path
