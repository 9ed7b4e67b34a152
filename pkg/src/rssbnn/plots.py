"""Matplotlib figure rendering for the CLI report path.

Figures are written next to the delimited output files; the evaluation
module itself stays data-only.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluation import AttributionReport, RocDistribution
from .training import TrainReport

__all__ = [
    "save_roc_band_figure",
    "save_attribution_figure",
    "save_training_curves",
]


def save_roc_band_figure(dist: RocDistribution, path, title: str | None = None) -> None:
    """Mean ROC curve with its pointwise 5%/95% posterior band."""
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    ax.fill_between(
        dist.grid,
        dist.lower_tpr,
        dist.upper_tpr,
        color="tab:green",
        alpha=0.25,
        label="posterior band (5%-95%)",
    )
    ax.plot(
        dist.grid,
        dist.mean_tpr,
        color="tab:green",
        lw=2.0,
        label=f"mean curve (AUC={dist.mean_auc:.3f})",
    )
    ax.plot([0, 1], [0, 1], color="gray", ls="--", lw=1.0, label="chance")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_attribution_figure(
    report: AttributionReport, feature_meta: dict[int, dict] | None, path
) -> None:
    """Horizontal bars for the top ransomware-indicative features."""
    ranking = report.top_positive
    fig, ax = plt.subplots(figsize=(6.0, max(2.0, 0.35 * max(1, len(ranking)))))
    if ranking:
        names = []
        for fid, _ in ranking:
            info = (feature_meta or {}).get(fid, {})
            names.append(info.get("name") or f"feature_{fid}")
        scores = [s for _, s in ranking]
        pos = np.arange(len(ranking))[::-1]
        ax.barh(pos, scores, color="tab:blue")
        ax.set_yticks(pos)
        ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel("mean integrated-gradients score")
    ax.set_title("ransomware-indicative features")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_training_curves(report: TrainReport, path) -> None:
    """Train/validation loss and the KL/NLL split per epoch."""
    epochs = [r.epoch for r in report.records]
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.5))
    axes[0].plot(epochs, [r.train_loss for r in report.records], label="train loss")
    axes[0].plot(epochs, [r.val_loss for r in report.records], label="validation loss")
    if report.best_epoch is not None:
        axes[0].axvline(report.best_epoch, color="gray", ls=":", lw=1.0, label="best epoch")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend(fontsize=8)
    axes[1].plot(epochs, [r.kl_term for r in report.records], label="KL term")
    axes[1].plot(epochs, [r.nll_term for r in report.records], label="NLL term")
    axes[1].set_xlabel("epoch")
    axes[1].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
