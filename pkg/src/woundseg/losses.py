"""Segmentation losses composed from the differentiable element ops, plus
prediction binarization."""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, add, clip, div, log, mean_all, mul, neg, scalar, sum_all

CLAMP_EPS = 1e-7


def _check_pair(p: Tensor, g: Tensor, name: str) -> None:
    if p.shape != g.shape:
        raise ShapeError(f"{name}: prediction {p.shape} and target {g.shape} differ")
    if p.dtype != g.dtype:
        raise ShapeError(f"{name}: dtype mismatch {p.dtype} vs {g.dtype}")


def bce_loss(p: Tensor, g: Tensor) -> Tensor:
    """Mean binary cross-entropy; probabilities are clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    _check_pair(p, g, "bce_loss")
    one = scalar(1.0, dtype=p.dtype)
    pc = clip(p, CLAMP_EPS, 1.0 - CLAMP_EPS)
    g_const = Tensor(g.data)  # targets never need gradients
    pos = mul(g_const, log(pc))
    negterm = mul(add(neg(g_const), one), log(add(neg(pc), one)))
    return neg(mean_all(add(pos, negterm)))


def dice_loss(p: Tensor, g: Tensor, smooth: float = 1.0) -> Tensor:
    """Soft Dice loss over the whole batch tensor:
    1 - (2*sum(g*p) + s) / (sum(g) + sum(p) + s)."""
    _check_pair(p, g, "dice_loss")
    g_const = Tensor(g.data)
    inter = sum_all(mul(p, g_const))
    num = add(mul(inter, scalar(2.0, dtype=p.dtype)), scalar(smooth, dtype=p.dtype))
    den = add(add(sum_all(p), sum_all(g_const)), scalar(smooth, dtype=p.dtype))
    return add(neg(div(num, den)), scalar(1.0, dtype=p.dtype))


def seg_loss(p: Tensor, g: Tensor, lambda1: float = 1.0, lambda2: float = 1.0) -> Tensor:
    """Weighted sum of BCE and Dice: lambda1 * bce + lambda2 * dice."""
    weighted_bce = mul(bce_loss(p, g), scalar(lambda1, dtype=p.dtype))
    weighted_dice = mul(dice_loss(p, g), scalar(lambda2, dtype=p.dtype))
    return add(weighted_bce, weighted_dice)


def binarize(p: Tensor, threshold: float = 0.5) -> Tensor:
    """Hard mask: 1 where p >= threshold, else 0. Not differentiable."""
    return Tensor((p.data >= threshold).astype(p.dtype))


def binarize_array(p: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (p >= threshold).astype(p.dtype)
