"""Pixel cross-entropy plus land-masked Dice.

The numpy functions are the reference definitions (with closed-form gradients
for checking); the ``torch_*`` functions are what training backpropagates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F

LOG_EPS = 1e-8


@dataclass
class LossBreakdown:
    total: float
    ce: float
    dice: float
    alpha: float
    pixels_counted: int

    def to_dict(self) -> dict:
        return asdict(self)


def _check(Y: np.ndarray, Yhat: np.ndarray) -> None:
    if Y.shape != Yhat.shape:
        raise ValueError(f"shape mismatch: {Y.shape} vs {Yhat.shape}")
    if np.abs(Yhat.sum(-1) - 1.0).max() > 1e-4:
        raise ValueError("predictions are not normalized over classes")


def cross_entropy_loss(Y: np.ndarray, Yhat: np.ndarray, eps: float = LOG_EPS) -> float:
    """-(1 / HW) * sum_k sum_ij Y log Yhat, for H x W x K arrays."""
    Y, Yhat = np.asarray(Y, float), np.asarray(Yhat, float)
    _check(Y, Yhat)
    H, W = Y.shape[:2]
    return float(-(Y * np.log(np.maximum(Yhat, eps))).sum() / (H * W))


def _dice_ratios(Y, Yhat, L):
    L = L[..., None]
    inter = (Yhat * Y * L).sum(axis=(0, 1))
    den = (L * (Y + Yhat)).sum(axis=(0, 1))
    ratio = np.ones_like(den)
    np.divide(2 * inter, den, out=ratio, where=den > 0)
    return ratio, den


def land_masked_dice_loss(Y: np.ndarray, Yhat: np.ndarray, L: np.ndarray) -> float:
    """1 - mean_k [2 sum(Yhat Y L) / sum(L (Y + Yhat))]; a class with zero denominator scores 1."""
    Y, Yhat, L = np.asarray(Y, float), np.asarray(Yhat, float), np.asarray(L, float)
    _check(Y, Yhat)
    if L.shape != Y.shape[:2]:
        raise ValueError("land mask shape does not match labels")
    if L.sum() <= 0:
        raise ValueError("land mask is all zero")
    ratio, _ = _dice_ratios(Y, Yhat, L)
    return float(1.0 - ratio.mean())


def composite_loss(Y, Yhat, L, alpha: float) -> LossBreakdown:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    ce = cross_entropy_loss(Y, Yhat)
    dice = land_masked_dice_loss(Y, Yhat, L)
    H, W = np.shape(Y)[:2]
    return LossBreakdown(alpha * ce + (1 - alpha) * dice, ce, dice, alpha, H * W)


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def composite_loss_from_logits(Y, logits, L, alpha: float) -> float:
    return composite_loss(Y, softmax(np.asarray(logits, float)), L, alpha).total


def composite_loss_grad(Y, logits, L, alpha: float, eps: float = LOG_EPS) -> np.ndarray:
    """Closed-form d(total)/d(logits) for H x W x K logits."""
    Y, L = np.asarray(Y, float), np.asarray(L, float)
    p = softmax(np.asarray(logits, float))
    H, W, K = p.shape
    g_ce = np.where(p >= eps, -Y / np.maximum(p, eps), 0.0) / (H * W)
    ratio, den = _dice_ratios(Y, p, L)
    safe = np.where(den > 0, den, 1.0)
    g_dice = -(2 * L[..., None] / safe) * (Y - ratio / 2) / K
    g_dice = np.where(den > 0, g_dice, 0.0)
    g = alpha * g_ce + (1 - alpha) * g_dice
    return p * (g - (p * g).sum(-1, keepdims=True))


# -- torch, batched (B, K, H, W) -------------------------------------------------


def torch_cross_entropy(log_probs: torch.Tensor, labels: torch.Tensor, eps: float = LOG_EPS) -> torch.Tensor:
    """Per-sample CE, shape (B,)."""
    lp = log_probs.gather(1, labels.unsqueeze(1)).squeeze(1).clamp_min(math.log(eps))
    return -lp.flatten(1).mean(1)


def torch_dice(log_probs: torch.Tensor, labels: torch.Tensor, land: torch.Tensor) -> torch.Tensor:
    """Per-sample land-masked Dice loss, shape (B,)."""
    K = log_probs.shape[1]
    p = log_probs.exp()
    Y = F.one_hot(labels, K).permute(0, 3, 1, 2).to(p.dtype)
    L = land.unsqueeze(1).to(p.dtype)
    inter = (p * Y * L).sum((2, 3))
    den = (L * (Y + p)).sum((2, 3))
    ratio = torch.where(den > 0, 2 * inter / torch.where(den > 0, den, torch.ones_like(den)), torch.ones_like(den))
    return 1 - ratio.mean(1)


def torch_composite(log_probs, labels, land, alpha: float, use_land_mask: bool = True):
    """Batch-mean (total, ce, dice). Without the land mask, Dice counts every pixel."""
    if not use_land_mask:
        land = torch.ones_like(land)
    ce = torch_cross_entropy(log_probs, labels).mean()
    dice = torch_dice(log_probs, labels, land).mean()
    return alpha * ce + (1 - alpha) * dice, ce, dice
