"""PNG figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)
    return path


def plot_curve(rows, path, title="training curve"):
    """Loss (left) and validation score (right) against epoch."""
    if not rows:
        return None
    ep = [r["epoch"] for r in rows]
    fig, (a, b) = plt.subplots(1, 2, figsize=(8, 3))
    a.plot(ep, [r["train_loss"] for r in rows], label="train")
    if "val_loss" in rows[0]:
        a.plot(ep, [r["val_loss"] for r in rows], label="val")
        b.plot(ep, [r["val_roc_auc"] for r in rows], label="val ROC-AUC")
        b.plot(ep, [r["val_accuracy"] for r in rows], label="val accuracy")
        b.set_ylim(0.0, 1.02)
        b.legend(fontsize=8)
    a.set_xlabel("epoch")
    a.set_ylabel("loss")
    a.legend(fontsize=8)
    b.set_xlabel("epoch")
    fig.suptitle(title, fontsize=10)
    return _save(fig, path)


def plot_loss(losses, path, title="pretraining loss"):
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(np.arange(1, len(losses) + 1), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title, fontsize=10)
    return _save(fig, path)


def plot_residuals(trials, path, tolerances=None):
    """Per-kind residual distribution on a log scale, with tolerance lines."""
    kinds = sorted({t["kind"] for t in trials})
    if not kinds:
        return None
    fig, ax = plt.subplots(figsize=(6, 3))
    for i, kind in enumerate(kinds):
        r = np.array([t["residual"] for t in trials if t["kind"] == kind], dtype=float)
        r = np.maximum(r, 1e-18)
        ax.scatter(np.full(r.size, i) + np.linspace(-0.2, 0.2, r.size), r, s=4)
        if tolerances and kind in tolerances:
            ax.hlines(max(tolerances[kind], 1e-18), i - 0.3, i + 0.3, colors="k", linestyles="dashed")
    ax.set_yscale("log")
    ax.set_xticks(range(len(kinds)), kinds)
    ax.set_ylabel("residual")
    return _save(fig, path)


def plot_variants(records, path, key="roc_auc"):
    """Per-variant score bars."""
    names = [r["variant"] for r in records]
    vals = [r.get(key, float("nan")) for r in records]
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(range(len(names)), vals)
    ax.set_xticks(range(len(names)), names, fontsize=8)
    ax.set_ylim(0.0, 1.02)
    ax.set_ylabel(key)
    return _save(fig, path)
