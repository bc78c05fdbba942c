"""Evaluation metrics and the Student-t summary used by the LLP bench."""
from __future__ import annotations

import math

import numpy as np
from scipy import stats

from kdm.errors import ShapeMismatch, SingleClass


def auc(scores, labels):
    """ROC AUC as the Mann-Whitney statistic (ties count one half).

    ``labels`` are truthy for positives. Raises :class:`SingleClass` when
    either class is absent.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ShapeMismatch(f"{s.shape[0]} scores for {y.shape[0]} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC needs both classes")
    ranks = stats.rankdata(s)  # average ranks handle ties
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def accuracy(pred, truth):
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeMismatch("prediction / truth length mismatch")
    return float(np.mean(pred == truth))


def nll(densities):
    """Mean negative log density (same floor as the likelihood)."""
    from kdm.density import LOG_EPS
    d = np.asarray(densities, dtype=np.float64)
    return float(-np.mean(np.log(d + LOG_EPS)))


def mse(y_hat, y):
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y_hat.shape != y.shape:
        raise ShapeMismatch("prediction / target shape mismatch")
    return float(np.mean((y_hat - y) ** 2))


def t_interval(values, level=0.99):
    """``(mean, half_width, n)`` of a Student-t interval; half width is nan for n < 2."""
    v = np.asarray(values, dtype=np.float64)
    n = v.size
    mean = float(v.mean())
    if n < 2:
        return mean, math.nan, n
    sem = float(v.std(ddof=1)) / math.sqrt(n)
    return mean, float(stats.t.ppf(0.5 + level / 2.0, n - 1)) * sem, n
