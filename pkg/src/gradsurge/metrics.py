"""Ranking metrics."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError, UsageError


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2).

    Computed from average ranks (Mann-Whitney U) in O(n log n).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise UsageError(f"{s.size} scores but {y.size} labels")
    if not np.all(np.isin(y, (0, 1))):
        raise UsageError("labels must be binary")
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs at least one positive and one negative label")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
