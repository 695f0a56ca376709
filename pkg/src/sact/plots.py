"""Figure rendering for CLI reports.

Every report that writes delimited output can also drop a PNG next to it.
Figures are a convenience view; the CSV and JSON files stay the source of
truth for downstream tooling.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_loss_curve(losses: list[float], path: str, window: int = 100) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(losses, lw=0.6, alpha=0.45, label="episode loss")
    if len(losses) >= window:
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(np.arange(window - 1, len(losses)), smooth, lw=1.8, label=f"rolling mean ({window})")
    ax.set_xlabel("episode")
    ax.set_ylabel("cross-entropy loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_sweep_curve(rows: list[dict], x_key: str, path: str, title: str = "") -> None:
    """Accuracy with error bars against one swept setting."""
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = np.arange(len(rows))
    acc = [row["accuracy"] for row in rows]
    ci = [row["ci95"] for row in rows]
    ax.errorbar(xs, acc, yerr=ci, fmt="o-", capsize=3)
    ax.set_xticks(xs)
    ax.set_xticklabels([str(row[x_key]) for row in rows])
    ax.set_xlabel(x_key)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_attention_grid(matrices: dict[int, np.ndarray], path: str, true_class: int | None = None) -> None:
    """One heatmap per class: query patches by support patches."""
    n = len(matrices)
    fig, axes = plt.subplots(1, n, figsize=(3.0 * n, 3.2), squeeze=False)
    for ax, (class_id, mat) in zip(axes[0], sorted(matrices.items())):
        im = ax.imshow(mat, cmap="viridis", aspect="equal")
        marker = " (true)" if class_id == true_class else ""
        ax.set_title(f"class {class_id}{marker}", fontsize=9)
        ax.set_xlabel("support patch")
        ax.set_ylabel("query patch")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
