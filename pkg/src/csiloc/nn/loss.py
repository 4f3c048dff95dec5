from __future__ import annotations

import numpy as np

from ..errors import DimensionError


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element, and its gradient w.r.t. ``pred``.

    Returns ``(loss, grad)`` where ``grad = 2 * (pred - target) / pred.size``.
    """
    if pred.shape != target.shape:
        raise DimensionError(
            f"mse_loss: prediction shape {list(pred.shape)} != target shape {list(target.shape)}"
        )
    diff = pred - target
    n = diff.size
    loss = float(np.dot(diff.ravel().astype(np.float64), diff.ravel().astype(np.float64)) / n)
    grad = (2.0 / n) * diff
    return loss, grad.astype(pred.dtype, copy=False)
