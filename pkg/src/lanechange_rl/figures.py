"""Figure rendering for the report path (files only, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

STRATEGY_COLORS = {"proposed": "tab:blue", "vanilla": "tab:orange", "il": "tab:green"}


def training_curves(curve_sets: dict, path: Path) -> None:
    """Three stacked panels: smoothed reward, final lateral position, rolling collision rate."""
    fig, axes = plt.subplots(3, 1, figsize=(7, 9), sharex=True)
    panels = [
        ("reward", "episode reward"),
        ("final_lateral", "final lateral position (m)"),
        ("collision_rate", "collision rate (rolling 50)"),
    ]
    for ax, (metric, label) in zip(axes, panels):
        for name, curves in sorted(curve_sets.items()):
            data = getattr(curves, metric)
            mean = data.mean(axis=0)
            std = data.std(axis=0, ddof=0)
            color = STRATEGY_COLORS.get(name, None)
            ax.plot(curves.episodes, mean, label=name, color=color)
            ax.fill_between(curves.episodes, mean - std, mean + std, alpha=0.2, color=color)
        ax.set_ylabel(label)
        ax.grid(True, alpha=0.3)
    axes[0].legend()
    axes[-1].set_xlabel("episode")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def kinematic_traces(trace: dict, path: Path) -> None:
    """Fig.4-style panels at 0.02 s resolution for one evaluated episode."""
    t = trace["time"]
    fig, axes = plt.subplots(3, 1, figsize=(7, 8), sharex=True)
    lateral0 = trace["lateral_pos"][0]
    axes[0].plot(t, trace["lateral_pos"] - lateral0, color="tab:blue")
    axes[0].set_ylabel("lateral displacement (m)")
    axes[1].plot(t, trace["lateral_speed"], color="tab:orange")
    axes[1].axhline(1.3, ls="--", color="gray", lw=0.8)
    axes[1].axhline(-1.3, ls="--", color="gray", lw=0.8)
    axes[1].set_ylabel("lateral velocity (m/s)")
    axes[2].plot(t, trace["longitudinal_speed"], color="tab:green")
    axes[2].set_ylabel("longitudinal velocity (m/s)")
    axes[2].set_xlabel("time (s)")
    for ax in axes:
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
