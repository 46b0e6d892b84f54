"""Classification metrics."""

from __future__ import annotations

import numpy as np

from dnr.errors import ContractViolation


def _check(preds, truth) -> tuple[np.ndarray, np.ndarray]:
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise ContractViolation(f"preds {preds.shape} and truth {truth.shape} must be equal-length vectors")
    if preds.size == 0:
        raise ContractViolation("metrics need at least one sample")
    return preds, truth


def accuracy(preds, truth) -> float:
    preds, truth = _check(preds, truth)
    return float(np.mean(preds == truth))


def weighted_f1(preds, truth, num_classes: int) -> float:
    """Support-weighted mean of per-class F1.

    A class with no true and no predicted positives has F1 = 0 (it also has
    zero weight, so it never changes the result).
    """
    preds, truth = _check(preds, truth)
    if min(preds.min(), truth.min()) < 0 or max(preds.max(), truth.max()) >= num_classes:
        raise ContractViolation(f"labels must lie in [0, {num_classes})")
    tp = np.bincount(truth[preds == truth], minlength=num_classes).astype(np.float64)
    predicted = np.bincount(preds, minlength=num_classes).astype(np.float64)
    support = np.bincount(truth, minlength=num_classes).astype(np.float64)
    denom = predicted + support
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(num_classes), where=denom > 0)
    return float(np.sum(f1 * support) / truth.size)
