"""Figures written next to CLI outputs. Uses the non-interactive Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}

COLORS = {"tp": "#1b9e77", "fp": "#d95f02", "fn": "#7570b3", "tn": "#bbbbbb"}


def _save(fig, path):
    fig.tight_layout()
    # no Software tag: output bytes do not depend on the matplotlib version
    fig.savefig(path, metadata={"Software": None} if str(path).endswith(".png") else None)
    plt.close(fig)


def plot_training_history(history: list[dict], path) -> None:
    """Loss and accuracy per epoch, with the learning rate on a log axis."""
    epochs = [h["epoch"] for h in history]
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_a) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        ax_l.plot(epochs, [h["train_loss"] for h in history], label="train")
        if any("val_loss" in h for h in history):
            ax_l.plot(epochs, [h.get("val_loss", np.nan) for h in history], label="validation")
        ax_l.set_xlabel("epoch")
        ax_l.set_ylabel("cross-entropy")
        ax_l.legend(frameon=False)
        lr = ax_l.twinx()
        lr.semilogy(epochs, [h["lr"] for h in history], color="0.6", lw=0.8, ls="--")
        lr.set_ylabel("learning rate", color="0.4")
        ax_a.plot(epochs, [h["train_acc"] for h in history], label="train")
        if any("val_acc" in h for h in history):
            ax_a.plot(epochs, [h.get("val_acc", np.nan) for h in history], label="validation")
        ax_a.set_xlabel("epoch")
        ax_a.set_ylabel("accuracy")
        ax_a.set_ylim(0, 1.02)
        _save(fig, path)


def plot_edge_comparison(points: np.ndarray, pred_mask, gt_mask, path, title: str | None = None) -> None:
    """Three orthographic views colouring each point TP / FP / FN / TN."""
    pred = np.asarray(pred_mask, dtype=bool)
    gt = np.asarray(gt_mask, dtype=bool)
    cats = {"tn": ~pred & ~gt, "fn": ~pred & gt, "fp": pred & ~gt, "tp": pred & gt}
    views = (("x", "y", 0, 1), ("x", "z", 0, 2), ("y", "z", 1, 2))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(8.0, 2.9))
        for ax, (lx, ly, i, j) in zip(axes, views):
            for name, m in cats.items():
                if m.any():
                    size = 1.5 if name == "tn" else 4.0
                    ax.scatter(points[m, i], points[m, j], s=size, c=COLORS[name], label=f"{name.upper()} ({m.sum()})",
                               linewidths=0)
            ax.set_xlabel(lx)
            ax.set_ylabel(ly)
            ax.set_aspect("equal", adjustable="datalim")
        axes[-1].legend(frameon=False, loc="center left", bbox_to_anchor=(1.0, 0.5), markerscale=2)
        if title:
            fig.suptitle(title)
        _save(fig, path)


def plot_probability_histogram(probs: np.ndarray, path, threshold: float = 0.5) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.5, 2.6))
        ax.hist(probs, bins=np.linspace(0, 1, 41), color="#4c72b0")
        ax.axvline(threshold, color="k", lw=0.8, ls="--")
        ax.set_xlabel("edge probability")
        ax.set_ylabel("points")
        _save(fig, path)
