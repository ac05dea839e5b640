"""Figure rendering for the report paths (written beside the CSV/JSON)."""

from __future__ import annotations

from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_history_figure(history: Sequence[Mapping], path) -> None:
    """Training loss and validation metrics against epoch."""
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_val) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_loss.plot(epochs, [row["train_loss"] for row in history], marker="o", ms=3)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train BCE")
    ax_loss.grid(alpha=0.3)
    for key, label in (("val_dsc", "DSC"), ("val_se", "SE"), ("val_sp", "SP"), ("val_acc", "ACC")):
        ax_val.plot(epochs, [row[key] for row in history], marker="o", ms=3, label=label)
    ax_val.set_xlabel("epoch")
    ax_val.set_ylabel("validation metric")
    ax_val.set_ylim(0.0, 1.05)
    ax_val.grid(alpha=0.3)
    ax_val.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bench_figure(rows: Sequence, slopes: Mapping[str, float], path) -> None:
    """Log-log wall time per variant with the fitted slopes in the legend."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for variant in sorted({r.variant for r in rows}):
        sub = sorted((r for r in rows if r.variant == variant), key=lambda r: r.n)
        ax.loglog(
            [r.n for r in sub],
            [r.wall_ns / 1e6 for r in sub],
            marker="o",
            label=f"{variant} (slope {slopes[variant]:.2f})",
        )
    ax.set_xlabel("tokens n")
    ax.set_ylabel("wall time [ms]")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_ablation_figure(rows: Sequence[Mapping], path) -> None:
    """Grouped bars of the four metrics per ablation setting."""
    settings = [row["setting"] for row in rows]
    keys = ("dsc", "se", "sp", "acc")
    x = np.arange(len(settings))
    width = 0.2
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for i, key in enumerate(keys):
        ax.bar(x + (i - 1.5) * width, [row[key] for row in rows], width, label=key.upper())
    ax.set_xticks(x)
    ax.set_xticklabels(settings)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("metric")
    ax.grid(alpha=0.3, axis="y")
    ax.legend(fontsize=8, ncol=4)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_eval_figure(per_sample: Sequence[Mapping], path) -> None:
    """Histogram of per-sample Dice scores."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist([row["dsc"] for row in per_sample], bins=20, range=(0.0, 1.0), edgecolor="black")
    ax.set_xlabel("per-sample DSC")
    ax.set_ylabel("samples")
    ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
