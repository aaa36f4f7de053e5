"""Matplotlib figures written next to the CSV/JSON reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_history(history, columns, path, title="training losses"):
    """One line per loss term against step."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = [row["step"] for row in history]
    for c in columns:
        if c in ("step", "epoch"):
            continue
        ax.plot(steps, [row[c] for row in history], label=c, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _finish(fig, path)


def plot_interpolation_grid(grid, cells, path):
    """Grid image with a density label above each column."""
    h2, width = grid.shape[:2]
    n = len(cells)
    fig, ax = plt.subplots(figsize=(max(4, width / 40), max(2, h2 / 40) + 0.4))
    ax.imshow(np.clip(grid, 0, 1), interpolation="nearest")
    cell = width / n
    ax.set_xticks([cell * (j + 0.5) for j in range(n)])
    ax.set_xticklabels([f"s={c['scale']:.1f}" for c in cells], fontsize=7)
    ax.xaxis.tick_top()
    ax.set_yticks([h2 / 4, 3 * h2 / 4])
    ax.set_yticklabels(["sketch", "result"], fontsize=7)
    fig.tight_layout()
    return _finish(fig, path)


def plot_linearity(scores, scales, path, title="first principal component vs density"):
    """PC1 score per image (one faint line each) against density."""
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    for row in np.asarray(scores):
        ax.plot(scales, row, color="tab:blue", alpha=0.3, linewidth=1)
    ax.set_xlabel("density s")
    ax.set_ylabel("PC1 score")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    return _finish(fig, path)


def plot_metric_bars(records, metric, path):
    """Bar chart of one metric across variants (NaN entries skipped)."""
    rows = [(r.variant, getattr(r, metric)) for r in records
            if not math.isnan(getattr(r, metric))]
    fig, ax = plt.subplots(figsize=(max(3, 1.2 * len(rows)), 3))
    ax.bar([v for v, _ in rows], [m for _, m in rows], color="tab:gray")
    ax.set_ylabel(metric)
    ax.tick_params(axis="x", labelsize=7)
    fig.tight_layout()
    return _finish(fig, path)
