"""MAE, Pearson correlation and ROC AUC."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata


def _pair(a, b, name):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"{name}: length mismatch ({a.size} vs {b.size})")
    if a.size == 0:
        raise ValueError(f"{name}: empty input")
    return a, b


def mae(preds, truths) -> float:
    p, t = _pair(preds, truths, "mae")
    return float(np.mean(np.abs(p - t)))


def pearson(x, y) -> float:
    x, y = _pair(x, y, "pearson")
    if x.size < 2:
        raise ValueError("pearson: need at least 2 samples")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = np.dot(dx, dx), np.dot(dy, dy)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson: zero variance input")
    return float(np.clip(np.dot(dx, dy) / np.sqrt(sxx * syy), -1.0, 1.0))


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Computed from mid-ranks (Mann-Whitney U), which equals the pairwise count.
    """
    s, y = _pair(scores, labels, "auc")
    pos = y == 1
    neg = y == 0
    if not np.all(pos | neg):
        raise ValueError("auc: labels must be 0 or 1")
    n1, n0 = int(pos.sum()), int(neg.sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("auc: both classes must be present")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))
