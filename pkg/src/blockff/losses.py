"""Block-local objectives and the global cross-entropy baseline.

The two local losses are the same function of the goodness matrix: the
per-sample loss is ``log_sum_exp(row) - row[label]``, i.e. the true
class score must beat the smoothed aggregate of all class scores.  They
differ only in how the goodness matrix is produced, so both names run
the identical arithmetic path and agree exactly.  Cross-entropy on
logits is the same expression again, kept as its own surface for the
backprop baseline.

Every loss returns ``(LossValue, gradient)`` where the gradient is
``(softmax(rows) - onehot) / B``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .goodness import GoodnessMatrix
from .tensor import ShapeError, check_finite, log_sum_exp, softmax


@dataclass
class LossValue:
    scalar: float
    per_sample: np.ndarray


def _softmax_margin(scores, labels, context):
    if isinstance(scores, GoodnessMatrix):
        scores = scores.values
    if scores.ndim != 2:
        raise ShapeError(f"{context}: expected [B, J] scores, got {scores.shape}")
    check_finite(scores, context)
    labels = np.asarray(labels)
    B, J = scores.shape
    if labels.shape != (B,):
        raise ShapeError(f"{context}: labels must be [{B}], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= J:
        raise ValueError(f"{context}: labels out of range [0, {J})")
    rows = np.arange(B)
    per_sample = log_sum_exp(scores) - scores[rows, labels]
    grad = softmax(scores)
    grad[rows, labels] -= 1.0
    grad /= B
    return LossValue(float(per_sample.mean()), per_sample), grad.astype(scores.dtype, copy=False)


def loss_sff(g, labels):
    """Local loss for head-route goodness; gradient w.r.t. the goodness matrix."""
    return _softmax_margin(g, labels, "loss_sff")


def loss_cwc(g, labels):
    """Local loss for partition-route goodness; same arithmetic as loss_sff."""
    return _softmax_margin(g, labels, "loss_cwc")


def cross_entropy(logits, labels):
    """Softmax cross-entropy over logits, mean over the batch."""
    return _softmax_margin(logits, labels, "cross_entropy")
