"""Figure rendering for reports; file output only, no display backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def render_recall_curve(
    recall: dict[int, float],
    reference: dict[int, float] | None,
    path: str | Path,
) -> Path:
    """Recall@k line plot; the reference series renders dashed."""
    path = Path(path)
    ks = sorted(recall)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ks, [recall[k] for k in ks], marker="o", label="this run")
    if reference:
        ref_ks = sorted(k for k in reference if k in set(ks)) or sorted(reference)
        ax.plot(
            ref_ks,
            [reference[k] for k in ref_ks],
            marker="s",
            linestyle="--",
            label="paper-reported",
        )
    ax.set_xscale("log")
    ax.set_xticks(ks)
    ax.get_xaxis().set_major_formatter(plt.ScalarFormatter())
    ax.set_xlabel("k")
    ax.set_ylabel("recall@k")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_loss_curve(losses: Sequence[float], path: str | Path) -> Path:
    """Per-step training loss plot."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(len(losses)), losses, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
