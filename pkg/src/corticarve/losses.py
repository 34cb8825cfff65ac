"""Training objectives with analytic gradients.

Both losses return value plus gradient with respect to the prediction in one
fused pass. The soft Dice follows the printed two-class similarity verbatim
(per-class ratio |y.t| / |y+t|, no factor 2): perfect agreement scores 0.5
per class, so the minimized loss is 1 - similarity in [0, 1].
"""

from __future__ import annotations

import warnings
from typing import NamedTuple

import numpy as np


class LossResult(NamedTuple):
    value: float
    gradient: np.ndarray


def _as_array(x):
    return np.asarray(getattr(x, "values", getattr(x, "data", x)))


def sdt_loss(d, d_hat, weights) -> LossResult:
    """Weighted MSE over the banded distance target.

    value = sum(w * (d - d_hat)^2) / sum(w), gradient d/dd = 2w(d - d_hat)/sum(w).
    Weights are expected in {1, b}; any uniform rescale cancels.
    """
    d = _as_array(d)
    d_hat = _as_array(d_hat)
    w = _as_array(weights)
    if d.shape != d_hat.shape or d.shape != w.shape:
        raise ValueError("prediction, target, and weights must share a shape")
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("weights must have positive sum")
    r = d - d_hat
    value = float((w * r * r).sum() / wsum)
    grad = (2.0 / wsum) * w * r
    return LossResult(value, grad)


def dice_loss(y, target_mask) -> LossResult:
    """Two-class soft Dice loss: 1 - sum over channels of |y.t| / |y + t|.

    y holds the two softmax channels (..., 2) ordered (non-brain, brain) and
    summing to 1 per voxel; the gradient is with respect to y. A channel empty
    in both prediction and target contributes the perfect score 0.5 and a
    zero gradient (flagged with a warning).
    """
    y = _as_array(y)
    t_brain = _as_array(target_mask)
    if y.ndim != 4 or y.shape[-1] != 2:
        raise ValueError("prediction must have two trailing channels")
    if y.shape[:3] != t_brain.shape:
        raise ValueError("prediction and mask dims differ")
    t = np.empty_like(y)
    t[..., 0] = ~t_brain if t_brain.dtype == np.bool_ else 1 - t_brain
    t[..., 1] = t_brain
    value = 1.0
    grad = np.zeros_like(y)
    for c in range(2):
        yc = y[..., c]
        tc = t[..., c]
        num = float((yc * tc).sum())
        den = float((yc + tc).sum())
        if den == 0.0:
            warnings.warn(f"dice channel {c} empty in prediction and target; scored perfect")
            value -= 0.5
            continue
        value -= num / den
        # quotient rule: d/dy (num/den) = (t*den - num) / den^2
        grad[..., c] = -(tc * den - num) / (den * den)
    return LossResult(value, grad)
