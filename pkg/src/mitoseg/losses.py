"""Segmentation training losses: clipped BCE, Tversky, and their weighted sum."""
from __future__ import annotations

import numpy as np

from .ndcore import ContractError, Tensor, binary_cross_entropy

BCE_EPS = 1e-7


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    return Tensor(arr, dtype=np.float64 if arr.dtype == np.float64 else np.float32)


def _binary_target(target, like: Tensor) -> np.ndarray:
    g = np.asarray(target.data if isinstance(target, Tensor) else target)
    if not np.all((g == 0) | (g == 1)):
        raise ContractError("target mask must contain only 0 and 1")
    if g.size != like.size:
        raise ContractError(f"target has {g.size} elements, prediction has {like.size}")
    return g.astype(like.dtype).reshape(like.shape)


def bce_loss(pred, target, eps: float = BCE_EPS) -> Tensor:
    """Pixel-mean binary cross-entropy; ``pred`` is clipped to [eps, 1-eps]."""
    pred = _as_tensor(pred)
    return binary_cross_entropy(pred, _binary_target(target, pred), eps=eps)


def tversky_loss(pred, target, alpha: float = 0.3, beta: float = 0.7, smooth: float = 1.0) -> Tensor:
    """1 - (TP + s) / (TP + alpha*FP + beta*FN + s) over soft counts.

    beta > alpha penalises missed foreground more than false alarms.
    """
    if alpha < 0 or beta < 0:
        raise ValueError(f"alpha and beta must be non-negative, got {alpha}, {beta}")
    pred = _as_tensor(pred)
    g = _binary_target(target, pred)
    tp = (pred * g).sum()
    fp = (pred * (1.0 - g)).sum()
    fn = ((1.0 - pred) * g).sum()
    return 1.0 - (tp + smooth) / (tp + alpha * fp + beta * fn + smooth)


def soft_counts(pred, target) -> tuple[float, float, float]:
    p = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64).reshape(-1)
    g = np.asarray(target, dtype=np.float64).reshape(-1)
    return float(np.sum(p * g)), float(np.sum(p * (1 - g))), float(np.sum((1 - p) * g))


def combined_loss(pred, target, bce_weight: float = 0.3, tversky_weight: float = 0.7,
                  alpha: float = 0.3, beta: float = 0.7, smooth: float = 1.0) -> Tensor:
    pred = _as_tensor(pred)
    return (bce_weight * bce_loss(pred, target)
            + tversky_weight * tversky_loss(pred, target, alpha, beta, smooth))
