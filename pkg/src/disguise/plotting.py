"""Figures written next to CLI reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"disguise": "#cc2529", "clean": "#3969b1", "flip": "#3e9651", "total": "#000000"}

_RC = {
    "axes.spines.right": False,
    "axes.spines.top": False,
    "axes.labelsize": 10,
    "legend.fontsize": 8,
    "legend.framealpha": 0.5,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "figure.figsize": (5.0, 3.5),
    "savefig.dpi": 100,
}


def _save(fig, path) -> None:
    # no Software/date metadata so reruns are byte-identical
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def plot_trace(trace: list, path, gamma1: float | None = None, gamma2: float | None = None) -> None:
    """Distances against epoch for one disguise run."""
    epochs = [r["epoch"] for r in trace]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(epochs, [r["d1"] for r in trace], color=COLORS["clean"], label="d1 (input)")
        ax.plot(epochs, [r["d2"] for r in trace], color=COLORS["disguise"], label="d2 (latent)")
        if "d2_flip" in trace[0]:
            ax.plot(epochs, [r["d2_flip"] for r in trace], color=COLORS["flip"], label="d2 (flipped)")
        if "recon" in trace[0]:
            ax.plot(epochs, [r["recon"] for r in trace], color="0.5", label="reconstruction")
        if gamma1 is not None:
            ax.axhline(gamma1, color=COLORS["clean"], ls=":", lw=0.8)
        if gamma2 is not None:
            ax.axhline(gamma2, color=COLORS["disguise"], ls=":", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("distance")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)


def plot_losses(losses, path) -> None:
    """Per-epoch training loss."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        ax.plot(np.arange(1, len(losses) + 1), losses, color=COLORS["total"])
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean reconstruction d1")
        fig.tight_layout()
        _save(fig, path)


def plot_scores(scores: np.ndarray, threshold: float, path, labels: np.ndarray | None = None,
                xlabel: str = "reconstruction loss") -> None:
    """Histogram of per-sample scores with the decision threshold."""
    scores = np.asarray(scores, dtype=float)
    bins = np.linspace(min(scores.min(), threshold), max(scores.max(), threshold), 30)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots()
        if labels is None:
            ax.hist(scores, bins=bins, color="0.6")
        else:
            labels = np.asarray(labels, dtype=bool)
            ax.hist(scores[~labels], bins=bins, color=COLORS["clean"], alpha=0.7, label="clean")
            ax.hist(scores[labels], bins=bins, color=COLORS["disguise"], alpha=0.7, label="disguise")
            ax.legend()
        ax.axvline(threshold, color="k", ls="--", lw=1)
        ax.set_xlabel(xlabel)
        ax.set_ylabel("count")
        fig.tight_layout()
        _save(fig, path)


def roc_curve(pos: np.ndarray, neg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """False and true positive rates as the threshold sweeps down the scores."""
    pos, neg = np.asarray(pos, float), np.asarray(neg, float)
    thresholds = np.unique(np.concatenate([pos, neg]))[::-1]
    fpr = [0.0] + [float(np.mean(neg >= t)) for t in thresholds]
    tpr = [0.0] + [float(np.mean(pos >= t)) for t in thresholds]
    return np.array(fpr), np.array(tpr)


def plot_roc(pos, neg, path, auc: float | None = None) -> None:
    fpr, tpr = roc_curve(pos, neg)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(3.5, 3.5))
        ax.plot(fpr, tpr, color=COLORS["disguise"], drawstyle="steps-post",
                label=None if auc is None else f"AUC = {auc:.4f}")
        ax.plot([0, 1], [0, 1], color="0.7", ls=":", lw=0.8)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("false positive rate")
        ax.set_ylabel("true positive rate")
        if auc is not None:
            ax.legend(loc="lower right")
        fig.tight_layout()
        _save(fig, path)
