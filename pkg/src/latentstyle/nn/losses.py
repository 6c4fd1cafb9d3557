from __future__ import annotations

from typing import Tuple

import numpy as np

from .layers import check_finite, softmax


def l1_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean absolute error over all entries and its (sub)gradient w.r.t. ``pred``.

    The subgradient at exact ties is 0.
    """
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    if n == 0:
        return 0.0, np.zeros_like(pred)
    loss = float(np.abs(diff).sum() / n)
    return check_finite(np.float64(loss), "l1_loss").item(), np.sign(diff) / n


def cross_entropy(logits: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy averaged over rows of ``logits`` ``[B, K]``."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    b, k = logits.shape
    if k < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    if labels.shape != (b,):
        raise ValueError(f"expected {b} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu" or np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"labels must be integers in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(b), labels].mean())
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    return check_finite(np.float64(loss), "cross_entropy").item(), grad / b
