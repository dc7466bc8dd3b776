"""Ranking and threshold metrics for image- and pixel-level evaluation."""
from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError


def _prepare(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise UndefinedMetricError("metric is undefined when only one class is present")
    return s, y, n_pos


def auroc(scores, labels) -> float:
    """Probability that a positive outscores a negative, ties counting one half.

    Computed from average ranks (Mann-Whitney U), O(n log n).
    """
    s, y, n_pos = _prepare(scores, labels)
    n_neg = y.size - n_pos
    ranks = rankdata(s)  # average ranks for ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _threshold_counts(s, y):
    """True/false positive counts when predicting ``score >= t`` for each distinct t, descending."""
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    # last index of every run of equal scores
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    return s_sorted[last], tp[last], fp[last]


def average_precision(scores, labels) -> float:
    """Step-wise area under the precision-recall curve.

    Tied scores form a single threshold, so the result does not depend on the
    input order: ``sum_k (R_k - R_{k-1}) * P_k`` over distinct thresholds.
    """
    s, y, n_pos = _prepare(scores, labels)
    _, tp, fp = _threshold_counts(s, y)
    precision = tp / (tp + fp)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_step * precision))


def f1_accuracy(scores, labels):
    """Best-F1 threshold scan; returns ``(f1, accuracy, threshold)``.

    Candidate thresholds are the distinct scores with the rule ``score >= t``.
    Ties in F1 go to the higher accuracy, then to the higher threshold.
    """
    s, y, n_pos = _prepare(scores, labels)
    n = y.size
    thr, tp, fp = _threshold_counts(s, y)
    fn = n_pos - tp
    tn = (n - n_pos) - fp
    f1 = 2 * tp / (2 * tp + fp + fn)
    acc = (tp + tn) / n
    best = np.lexsort((thr, acc, f1))[-1]
    return float(f1[best]), float(acc[best]), float(thr[best])
