"""Matplotlib figure rendering for the report paths.

Figures are a convenience view next to the canonical CSV/PGM outputs:
attention heatmaps for a query pixel, consistency bars per variant, and
training curves. All rendering targets files through the Agg backend.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def attention_heatmaps(path, maps: dict[str, np.ndarray], query_rc=None,
                       title: str = "") -> None:
    """One row of heatmaps (total / pairwise / unary terms)."""
    names = [k for k, v in maps.items() if v is not None]
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3.6))
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        im = ax.imshow(maps[name], cmap="viridis")
        ax.set_title(name)
        ax.set_xticks([])
        ax.set_yticks([])
        if query_rc is not None:
            ax.plot(query_rc[1], query_rc[0], "r+", markersize=12, markeredgewidth=2)
        fig.colorbar(im, ax=ax, fraction=0.046)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def consistency_bars(path, report) -> None:
    """Grouped bars of the three consistency statistics per variant."""
    labels = [row.label for row in report.rows]
    stats = ["pair_within", "pair_boundary", "unary_boundary"]
    x = np.arange(len(labels))
    width = 0.27
    fig, ax = plt.subplots(figsize=(1.6 * len(labels) + 3, 4))
    for k, stat in enumerate(stats):
        vals = [getattr(row, stat) for row in report.rows]
        heights = [0.0 if v is None else v for v in vals]
        bars = ax.bar(x + (k - 1) * width, heights, width, label=stat)
        for bar, v in zip(bars, vals):
            if v is None:
                bar.set_hatch("//")
                bar.set_alpha(0.15)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20)
    ax.set_ylabel("overlap")
    ax.set_title(f"attention/ground-truth consistency "
                 f"({report.samples} samples, uniform query weighting)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def training_curves(path, trace) -> None:
    """Loss and mean-IoU curves over training iterations."""
    iters = [row.iteration for row in trace]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(iters, [row.loss for row in trace], marker="o")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("training loss")
    ax2.plot(iters, [row.train_miou for row in trace], marker="o", label="train")
    ax2.plot(iters, [row.val_miou for row in trace], marker="s", label="val")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("mIoU")
    ax2.set_ylim(0, 1)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def overhead_curve(path, rows) -> None:
    """Time-overhead of the disentangled block as the map grows."""
    fig, ax = plt.subplots(figsize=(5, 3.6))
    ax.plot([r.positions for r in rows],
            [r.time_overhead * 100 for r in rows], marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("positions (HW)")
    ax.set_ylabel("time overhead (%)")
    ax.set_title(f"closed-form overhead at C={rows[0].channels}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
