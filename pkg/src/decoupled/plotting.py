"""Static figures written next to the CSV outputs of the CLI.

Everything renders through the non-interactive Agg backend and returns the
path it wrote.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_projection_comparison(table, path):
    """Points in the plane and their softmax / sparsemax images on the 1-simplex.

    ``table`` has the columns x0, x1, soft0, soft1, sparse0, sparse1.
    """
    table = np.asarray(table)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot([0, 1], [1, 0], color="0.6", lw=1, label="simplex")
    ax.scatter(table[:, 0], table[:, 1], s=6, color="0.75", label="input")
    ax.scatter(table[:, 2], table[:, 3], s=8, color="tab:blue", label="softmax")
    ax.scatter(table[:, 4], table[:, 5], s=8, color="tab:red", marker="x", label="sparsemax")
    ax.set_xlabel("coordinate 0")
    ax.set_ylabel("coordinate 1")
    ax.set_aspect("equal")
    ax.legend(loc="lower left", fontsize=8)
    return _save(fig, path)


def plot_meta(times, A, path):
    """Every entry a_ij(t) of the interaction matrix as its own line."""
    A = np.asarray(A)
    n = A.shape[1]
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3), squeeze=False, sharey=True)
    for i in range(n):
        ax = axes[0, i]
        for j in range(n):
            ax.plot(times, A[:, i, j], label=f"j={j}")
        ax.set_title(f"row {i}")
        ax.set_xlabel("t")
        ax.set_ylim(-0.02, 1.02)
    axes[0, 0].set_ylabel("a_ij")
    axes[0, -1].legend(fontsize=7)
    return _save(fig, path)


def plot_focus(focus, path, channel_names=None):
    focus = np.asarray(focus)
    fig, ax = plt.subplots(figsize=(max(4, 0.35 * focus.shape[1] + 2), 0.6 * focus.shape[0] + 1.5))
    im = ax.imshow(focus, aspect="auto", cmap="viridis")
    ax.set_xlabel("input channel")
    ax.set_ylabel("sub-system")
    ax.set_yticks(range(focus.shape[0]))
    if channel_names is not None:
        ax.set_xticks(range(len(channel_names)), channel_names, rotation=90, fontsize=7)
    fig.colorbar(im, ax=ax)
    return _save(fig, path)


def plot_curves(curves, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(curves["epoch"], curves["train_loss"], label="train")
    ax.plot(curves["epoch"], curves["val_loss"], label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    return _save(fig, path)


def plot_ablation(rows, path, metric="accuracy"):
    names = [r["variant"] for r in rows]
    means = [r["mean"] for r in rows]
    stds = [r["std"] for r in rows]
    fig, ax = plt.subplots(figsize=(1.3 * len(rows) + 2, 3.5))
    ax.bar(range(len(rows)), means, yerr=stds, color="tab:blue", alpha=0.8)
    ax.set_xticks(range(len(rows)), names, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(metric)
    return _save(fig, path)
