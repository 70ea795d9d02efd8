"""Matplotlib rendering for training metrics and evaluation reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_loss_curves(records: list[dict], out_path) -> None:
    """Loss traces over training steps from the metrics log records."""
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.4))
    panels = (
        ("value_loss", "value"),
        ("planner_loss", "planner"),
        ("controller_loss", "controller"),
    )
    for ax, (key, title) in zip(axes, panels):
        ax.plot(steps, [r[key] for r in records], lw=1.2)
        if key == "controller_loss":
            ax.plot(steps, [r["contrastive"] for r in records],
                    lw=1.0, ls="--", label="contrastive")
            ax.legend(frameon=False, fontsize=8)
        ax.set_title(title)
        ax.set_xlabel("step")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("loss (window mean)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)


def plot_win_rates(report, out_path) -> None:
    """Bar chart of per-task win rates with deviation bars."""
    rows = report.rows
    x = np.arange(len(rows))
    colors = ["#4878d0" if not r.unseen else "#ee854a" for r in rows]
    fig, ax = plt.subplots(figsize=(1.1 * len(rows) + 2.5, 3.2))
    ax.bar(x, [r.win_rate for r in rows], yerr=[r.win_std for r in rows],
           color=colors, capsize=3)
    ax.set_xticks(x)
    ax.set_xticklabels([r.task for r in rows])
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("win rate")
    handles = [plt.Rectangle((0, 0), 1, 1, color="#4878d0"),
               plt.Rectangle((0, 0), 1, 1, color="#ee854a")]
    ax.legend(handles, ["source", "unseen"], frameon=False, fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=140)
    plt.close(fig)
