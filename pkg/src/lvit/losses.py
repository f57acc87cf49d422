"""Training objectives and evaluation metrics for single-class segmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LossConfig:
    alpha: float = 0.1
    smooth: float = 1e-5
    ce_clamp: float = 1e-7

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.smooth <= 0:
            raise ValueError("smooth must be positive")
        if not 0 < self.ce_clamp < 0.5:
            raise ValueError("ce_clamp must lie in (0, 0.5)")


def _check(p: Tensor, y) -> Tensor:
    y = y if isinstance(y, Tensor) else Tensor(np.asarray(y, dtype=p.dtype))
    if p.shape != y.shape:
        raise ShapeError(f"prediction {p.shape} and target {y.shape} differ")
    return y


def dice_loss(p: Tensor, y, smooth: float = 1e-5) -> Tensor:
    """1 − mean over (batch, class) of (2Σpy + s)/(Σp + Σy + s), sums over pixels."""
    y = _check(p, y)
    axes = tuple(range(2, p.ndim))
    inter = T.sum(p * y, axes)
    denom = T.sum(p, axes) + T.sum(y, axes) + smooth
    return 1.0 - T.mean((2.0 * inter + smooth) / denom)


def ce_loss(p: Tensor, y, clamp: float = 1e-7) -> Tensor:
    """Binary cross-entropy averaged over all pixels, p clamped to [clamp, 1 − clamp]."""
    y = _check(p, y)
    pc = T.clip(p, clamp, 1.0 - clamp)
    return -T.mean(y * T.log(pc) + (1.0 - y) * T.log(1.0 - pc))


def sup_loss(p: Tensor, y, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return (dice_loss(p, y, cfg.smooth) + ce_loss(p, y, cfg.ce_clamp)) * 0.5


def lv_loss(pseudo: Tensor, contrastive_mask) -> Tensor:
    """1 − cosine(flat pseudo, flat mask); a zero-norm operand counts as cosine 0."""
    mask = _check(pseudo, contrastive_mask)
    dot = T.sum(pseudo * mask)
    na2 = T.sum(pseudo * pseudo)
    nb2 = T.sum(mask * mask)
    if np.sqrt(na2.item()) < 1e-12 or np.sqrt(nb2.item()) < 1e-12:
        return Tensor(np.ones((), dtype=pseudo.dtype))
    return 1.0 - dot / (T.sqrt(na2) * T.sqrt(nb2))


def unsup_loss(p: Tensor, pseudo_target, lv: Tensor | float, cfg: LossConfig | None = None) -> Tensor:
    cfg = cfg or LossConfig()
    return sup_loss(p, pseudo_target, cfg) + cfg.alpha * lv


# -- metrics (plain arrays) ------------------------------------------------

THRESHOLD = 0.5


def binarize(p) -> np.ndarray:
    return np.asarray(p) >= THRESHOLD


def _binary_pair(p_bin, y_bin) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p_bin).astype(bool)
    y = np.asarray(y_bin).astype(bool)
    if p.shape != y.shape:
        raise ShapeError(f"masks {p.shape} and {y.shape} differ")
    return p, y


def dice_score(p_bin, y_bin) -> float:
    """2|p∩y| / (|p| + |y|); 1 when both masks are empty."""
    p, y = _binary_pair(p_bin, y_bin)
    total = int(p.sum()) + int(y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, y).sum()) / total


def miou(p_bin, y_bin) -> float:
    """Foreground |p∩y| / |p∪y|; 1 when both masks are empty."""
    p, y = _binary_pair(p_bin, y_bin)
    union = int(np.logical_or(p, y).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(p, y).sum()) / union
