"""Clustering accuracy under optimal matching, and NMI."""
from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def _encode(labels):
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    _, codes = np.unique(labels, return_inverse=True)
    return codes.ravel()


def contingency(pred, true) -> np.ndarray:
    p, t = _encode(pred), _encode(true)
    if p.size == 0:
        raise ValueError("empty label vectors")
    if p.size != t.size:
        raise ValueError(f"label vectors differ in length ({p.size} vs {t.size})")
    table = np.zeros((p.max() + 1, t.max() + 1), dtype=np.int64)
    np.add.at(table, (p, t), 1)
    return table


def accuracy_hungarian(pred, true) -> float:
    """Fraction of items correct after the best one-to-one cluster/class matching."""
    table = contingency(pred, true)
    r, c = linear_sum_assignment(table, maximize=True)
    return float(table[r, c].sum() / table.sum())


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(pred, true) -> float:
    """I(pred; true) over the arithmetic mean of the two entropies."""
    table = contingency(pred, true).astype(np.float64)
    hp, ht = _entropy(table.sum(axis=1)), _entropy(table.sum(axis=0))
    if hp == 0.0 or ht == 0.0:
        return 0.0
    P = table / table.sum()
    outer = np.outer(P.sum(axis=1), P.sum(axis=0))
    nz = P > 0
    mi = float(np.sum(P[nz] * np.log(P[nz] / outer[nz])))
    return float(np.clip(mi / (0.5 * (hp + ht)), 0.0, 1.0))
