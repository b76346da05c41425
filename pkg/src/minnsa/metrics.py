"""ROC/AUC and the Wilcoxon signed-rank test."""

import math
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata


def _check_binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels must have the same length")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n_pos = int((labels == 1).sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative label")
    return scores, labels.astype(bool), n_pos, n_neg


def auc(scores, labels):
    """Area under the ROC curve as the Mann-Whitney statistic (ties count 1/2)."""
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    ranks = rankdata(scores)  # midranks
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores, labels):
    """ROC points ``(fpr, tpr)`` from (0, 0) to (1, 1), one per distinct threshold."""
    scores, pos, n_pos, n_neg = _check_binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(pos[order])
    fp = np.cumsum(~pos[order])
    # keep the last index of every run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    fpr = np.r_[0.0, fp[last] / n_neg]
    tpr = np.r_[0.0, tp[last] / n_pos]
    return fpr, tpr


def trapezoid_area(fpr, tpr):
    fpr = np.asarray(fpr)
    tpr = np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


class WilcoxonResult(NamedTuple):
    statistic: float  # sum of ranks of positive differences
    pvalue: float
    n: int  # number of non-zero differences
    method: str  # "exact" or "normal"


def signed_rank_null_counts(doubled_ranks):
    """Number of sign assignments giving each value of twice the positive
    rank sum, indexed 0..sum(doubled_ranks)."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:total + 1 - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(a, b=None, exact_max_n=25):
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped and tied magnitudes get midranks. For
    ``n <= exact_max_n`` the p-value comes from the exact permutation
    distribution (ties included); otherwise from the normal approximation
    with tie-corrected variance.
    """
    a = np.asarray(a, dtype=np.float64)
    d = a if b is None else a - np.asarray(b, dtype=np.float64)
    if b is not None and a.shape != np.shape(b):
        raise ValueError("paired samples must have equal length")
    d = d[d != 0]
    n = len(d)
    if n == 0:
        raise ValueError("all paired differences are zero")
    ranks = rankdata(np.abs(d))
    t_plus = float(ranks[d > 0].sum())

    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = signed_rank_null_counts(doubled)
        t2 = int(round(2 * t_plus))
        le = int(counts[:t2 + 1].sum())
        ge = int(counts[t2:].sum())
        total = 1 << n
        p = min(total, 2 * min(le, ge)) / total
        return WilcoxonResult(t_plus, p, n, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts ** 3 - tie_counts).sum() / 48.0
    z = (t_plus - mean) / math.sqrt(var)
    p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(t_plus, p, n, "normal")
