"""Report figures, rendered straight to image files.

Every function takes an output path, draws with the Agg backend (no display
required), closes its figure and returns the path, so the CLI can drop
figures next to the delimited outputs.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .harness import RunResult, confidence_interval


def plot_loss_curves(path, results: list[RunResult]) -> Path:
    """Training and held-out loss per epoch, one pair of lines per run."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for r in results:
        epochs = np.arange(1, len(r.history) + 1)
        label = f"{r.variant} seed {r.seed}"
        line, = ax.plot(epochs, [e.train_loss for e in r.history],
                        label=f"{label} train")
        ax.plot(epochs, [e.val_loss for e in r.history], "--",
                color=line.get_color(), label=f"{label} val")
        ax.axvline(r.best_epoch, color=line.get_color(), alpha=0.25, lw=0.8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_ablation_accuracy(path, results_by_variant: dict[str, list[RunResult]]) -> Path:
    """Mean test accuracy per variant with Student-t error bars (omitted for
    single-run variants)."""
    path = Path(path)
    names = list(results_by_variant)
    means, halves = [], []
    for name in names:
        mean, half = confidence_interval([r.test_acc for r in results_by_variant[name]])
        means.append(mean)
        halves.append(half if np.isfinite(half) else 0.0)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.7 * len(names) + 1.5), 4))
    xs = np.arange(len(names))
    ax.bar(xs, means, yerr=halves, capsize=3, color="#4878a8")
    ax.set_xticks(xs)
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_confusion(path, confusion: np.ndarray, class_names=None) -> Path:
    """Row-true, column-predicted count heatmap with annotated cells."""
    path = Path(path)
    confusion = np.asarray(confusion)
    n = confusion.shape[0]
    names = list(class_names) if class_names else [str(i) for i in range(n)]
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * n, 0.8 + 0.6 * n))
    im = ax.imshow(confusion, cmap="Blues")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(int(confusion[i, j])), ha="center", va="center",
                    fontsize=8,
                    color="white" if confusion[i, j] > confusion.max() / 2 else "black")
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_explanation(path, explanation, feature_names=None, top_k: int = 10) -> Path:
    """Two panels: the largest feature-mask values and the optimiser's
    objective trace."""
    path = Path(path)
    mask = explanation.feature_mask
    top = explanation.top_features(top_k)
    if feature_names is None:
        labels = [f"f{i}" for i in top]
    else:
        labels = [str(feature_names[i]) for i in top]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
    ys = np.arange(top.size)
    ax1.barh(ys, mask[top], color="#a85448")
    ax1.set_yticks(ys)
    ax1.set_yticklabels(labels, fontsize=8)
    ax1.invert_yaxis()
    ax1.set_xlim(0.0, 1.0)
    ax1.set_xlabel("feature mask")
    ax1.set_title(f"node {explanation.node}, retention {explanation.retention:.3f}",
                  fontsize=9)
    ax2.plot(explanation.objective)
    ax2.set_xlabel("step")
    ax2.set_ylabel("objective")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
