"""Classification metrics and seed aggregation."""

from __future__ import annotations

import math

import numpy as np


def _midranks(x):
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    xs = x[order]
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def binary_roc_auc(scores, labels):
    """Mann-Whitney ROC-AUC; tied scores earn half credit."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC-AUC needs at least one positive and one negative")
    ranks = _midranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(probs, labels):
    """Binary AUC on P(class 1), or macro one-vs-rest for more classes.

    ``probs`` is n x C (or a length-n score vector for the binary case).
    """
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.ndim == 1:
        return binary_roc_auc(p, y)
    if p.shape[1] == 2:
        return binary_roc_auc(p[:, 1], y)
    aucs = [binary_roc_auc(p[:, c], y == c) for c in range(p.shape[1]) if 0 < np.sum(y == c) < len(y)]
    return float(np.mean(aucs)) if aucs else float("nan")


def accuracy(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    return float(np.mean(pred == labels))


def macro_f1(pred, labels):
    pred, labels = np.asarray(pred), np.asarray(labels)
    scores = []
    for c in np.union1d(pred, labels):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2.0 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def aggregate(records, keys=("roc_auc", "accuracy", "macro_f1")):
    """Mean and population std per key; exact summation keeps it order-independent."""
    out = {}
    for k in keys:
        vals = [float(r[k]) for r in records if k in r]
        if not vals:
            continue
        m = math.fsum(vals) / len(vals)
        var = math.fsum((v - m) ** 2 for v in vals) / len(vals)
        out[k] = {"mean": m, "std": math.sqrt(var), "n": len(vals)}
    return out
