"""Training losses on probability maps."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, as_tensor, make_result

CLAMP = 1e-7
DICE_SMOOTH = 1.0


def _check(y: Tensor, ybar) -> np.ndarray:
    t = ybar.data if isinstance(ybar, Tensor) else np.asarray(ybar)
    if t.shape != y.shape:
        raise ValueError(f"loss: prediction shape {y.shape} does not match target {t.shape}")
    return t.astype(y.dtype, copy=False)


def bce_loss(y: Tensor, ybar) -> Tensor:
    """Mean binary cross entropy over every pixel of every sample.

    Probabilities are clamped to [1e-7, 1 - 1e-7]. The gradient is evaluated at
    the clamped value and passed straight through, so saturated but wrong
    predictions still receive a training signal.
    """
    y = as_tensor(y)
    t = _check(y, ybar)
    yc = np.clip(y.data, CLAMP, 1 - CLAMP)
    n = y.data.size
    val = -(t * np.log(yc) + (1 - t) * np.log(1 - yc)).mean()

    def bw(g):
        return (g * (yc - t) / (yc * (1 - yc)) / n,)

    return make_result(np.asarray(val, dtype=y.dtype), (y,), "bce", bw)


def soft_dice_loss(y: Tensor, ybar) -> Tensor:
    """1 - (2 sum(y*t) + 1) / (sum(y) + sum(t) + 1), pooled over the batch."""
    y = as_tensor(y)
    t = _check(y, ybar)
    inter = float((y.data * t).sum(dtype=np.float64))
    denom = float(y.data.sum(dtype=np.float64) + t.sum(dtype=np.float64)) + DICE_SMOOTH
    num = 2 * inter + DICE_SMOOTH
    val = 1.0 - num / denom

    def bw(g):
        # d/dy of -(num/denom) = -(2 t * denom - num) / denom^2
        return (g * (-(2 * t * denom - num) / denom**2).astype(y.dtype),)

    return make_result(np.asarray(val, dtype=y.dtype), (y,), "soft_dice", bw)


LOSSES = {"bce": bce_loss, "soft_dice": soft_dice_loss}
