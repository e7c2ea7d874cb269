"""Report figures written next to the tab-separated logs.

Uses a local rc context so importing this module leaves global matplotlib
state alone.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "axes.linewidth": 0.8,
    "lines.linewidth": 1.2,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

BLUE = "#4C72B0"
ORANGE = "#D55E00"


def training_curves(history, path) -> Path:
    """Loss terms and validation R@1 per epoch, side by side."""
    path = Path(path)
    epochs = [h.epoch for h in history]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_r1) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        ax_loss.plot(epochs, [h.loss_s for h in history], color=BLUE, label="L_S")
        loss_d = np.array([h.loss_d for h in history], dtype=float)
        if np.isfinite(loss_d).any():
            ax_loss.plot(epochs, loss_d, color=ORANGE, label="L_D")
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("loss")
        ax_loss.legend(frameon=False)

        ax_r1.plot(epochs, [h.val_r1_t2v for h in history], color=BLUE, marker="o", ms=3, label="T2V")
        ax_r1.plot(epochs, [h.val_r1_v2t for h in history], color=ORANGE, marker="s", ms=3, label="V2T")
        ax_r1.set_xlabel("epoch")
        ax_r1.set_ylabel("val R@1 (%)")
        ax_r1.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def recall_curve(ranks_by_direction: dict[str, np.ndarray], path, max_k: int = 50) -> Path:
    """Cumulative R@K for K = 1..max_k, one line per direction."""
    path = Path(path)
    colors = {"t2v": BLUE, "v2t": ORANGE}
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.8))
        for direction, ranks in ranks_by_direction.items():
            ranks = np.asarray(ranks)
            ks = np.arange(1, min(max_k, ranks.max(initial=1)) + 1)
            recall = [100.0 * (ranks <= k).mean() for k in ks]
            ax.step(ks, recall, where="post", color=colors.get(direction), label=direction.upper())
        ax.set_xscale("log")
        ax.set_xlabel("K")
        ax.set_ylabel("R@K (%)")
        ax.set_ylim(0, 101)
        ax.legend(frameon=False, loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path
