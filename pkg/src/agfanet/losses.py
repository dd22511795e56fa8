"""Composite segmentation loss: weighted cross-entropy plus soft Dice.

All sums run over every voxel handed in, so a batch is scored as one
voxel set of size ``N``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

DEFAULT_LAMBDA = 0.6
DEFAULT_EPSILON = 1.0
PROB_CLAMP = 1e-7


@dataclass
class LossTerms:
    l_wce: float
    l_dice: float
    omega: float
    lam: float
    epsilon: float
    total: float
    tensor: Tensor = field(repr=False, compare=False, default=None)


def _labels(g, like: Tensor) -> np.ndarray:
    arr = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
    if arr.size != like.size:
        raise ShapeError(f"label voxel count {arr.size} != prediction voxel count {like.size}")
    return arr.reshape(like.shape)


def dice_loss(p: Tensor, g, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """``1 - (2 sum(g p) + eps) / (sum(g) + sum(p) + eps)``."""
    g = _labels(g, p)
    inter = ops.sum(ops.mul(p, g))
    num = ops.add(ops.mul(inter, 2.0), epsilon)
    den = ops.add(ops.sum(p), float(g.sum()) + epsilon)
    return ops.sub(1.0, ops.div(num, den))


def foreground_weight(p: np.ndarray) -> float:
    """``(N - sum p) / sum p`` on clamped probabilities."""
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    s = float(pc.sum())
    return (pc.size - s) / s


def weighted_ce_loss(p: Tensor, g, omega: Optional[float] = None) -> tuple:
    """Cross-entropy with the foreground term scaled by :func:`foreground_weight`.

    The weight is computed from the current predictions (unless ``omega`` is
    given) and enters the graph as a constant. Returns ``(loss, omega)``.
    """
    g = _labels(g, p)
    pc = ops.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if omega is None:
        omega = foreground_weight(p.data)
    fg = ops.mul(ops.log(pc), g * omega)
    bg = ops.mul(ops.log(ops.sub(1.0, pc)), 1.0 - g)
    loss = ops.mul(ops.sum(ops.add(fg, bg)), -1.0 / p.size)
    return loss, omega


def combined_loss(logits: Tensor, g, lam: float = DEFAULT_LAMBDA, epsilon: float = DEFAULT_EPSILON,
                  omega: Optional[float] = None) -> LossTerms:
    """``lam * WCE + (1 - lam) * Dice`` on sigmoid probabilities of ``logits``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    if epsilon <= 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    p = ops.sigmoid(logits)
    wce, omega = weighted_ce_loss(p, g, omega)
    dice = dice_loss(p, g, epsilon)
    total = ops.add(ops.mul(wce, lam), ops.mul(dice, 1.0 - lam))
    return LossTerms(wce.item(), dice.item(), omega, lam, epsilon, total.item(), total)
