"""Land-mask soft attention, scaled dot-product attention and two-stream fusion."""

from __future__ import annotations

import math
from typing import Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F


def trunc_normal_init(module: nn.Module, std: float = 0.02) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class SoftAttention(nn.Module):
    """Two 3x3 convolutions and a sigmoid turning the land mask into a (0, 1) weight map."""

    def __init__(self, hidden: int = 16):
        super().__init__()
        self.conv1 = nn.Conv2d(1, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, 1, 3, padding=1)
        trunc_normal_init(self)

    def forward(self, land_mask: torch.Tensor) -> torch.Tensor:
        # (B, H, W) -> (B, H, W)
        x = land_mask.unsqueeze(1).to(self.conv1.weight.dtype)
        return torch.sigmoid(self.conv2(F.relu(self.conv1(x)))).squeeze(1)


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False
):
    """softmax(Q K^T / sqrt(C)) V over all spatial positions of (B, C, H, W) maps."""
    if q.shape != k.shape or k.shape[0] != v.shape[0] or k.shape[2:] != v.shape[2:]:
        raise ValueError(f"shape mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)}")
    B, C, H, W = q.shape
    qf = q.flatten(2).transpose(1, 2)
    logits = qf @ k.flatten(2) / math.sqrt(C)
    weights = logits.softmax(dim=-1)
    out = (weights @ v.flatten(2).transpose(1, 2)).transpose(1, 2).reshape(B, v.shape[1], H, W)
    return (out, weights) if return_weights else out


class BidirectionalFusion(nn.Module):
    """Fuse the deepest RGB and VI feature maps.

    mode ``cross``: alpha * Attn(Q_vi, K_rgb, V_rgb) + (1 - alpha) * Attn(Q_rgb, K_vi, V_vi)
    mode ``self``:  alpha * Attn(Q_rgb, K_rgb, V_rgb) + (1 - alpha) * Attn(Q_vi, K_vi, V_vi)
    mode ``none``:  alpha * F_rgb + (1 - alpha) * F_vi
    """

    def __init__(self, dim: int, mode: str = "cross", alpha_init: float = 0.8, share_qkv: bool = False):
        super().__init__()
        if mode not in ("cross", "self", "none"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.share_qkv = share_qkv
        self.alpha = nn.Parameter(torch.tensor(float(alpha_init)))
        self.q_rgb, self.k_rgb, self.v_rgb = (nn.Conv2d(dim, dim, 1) for _ in range(3))
        if not share_qkv:
            self.q_vi, self.k_vi, self.v_vi = (nn.Conv2d(dim, dim, 1) for _ in range(3))
        trunc_normal_init(self)

    def qkv(self, f: torch.Tensor, stream: str) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        if stream == "vi" and not self.share_qkv:
            return self.q_vi(f), self.k_vi(f), self.v_vi(f)
        return self.q_rgb(f), self.k_rgb(f), self.v_rgb(f)

    def blend(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        return self.alpha * a + (1 - self.alpha) * b

    def attended(self, f_rgb: torch.Tensor, f_vi: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return the (rgb-side, vi-side) maps that get alpha-blended."""
        if f_rgb.shape != f_vi.shape:
            raise ValueError(f"shape mismatch: {tuple(f_rgb.shape)} vs {tuple(f_vi.shape)}")
        if self.mode == "none":
            return f_rgb, f_vi
        q_r, k_r, v_r = self.qkv(f_rgb, "rgb")
        q_v, k_v, v_v = self.qkv(f_vi, "vi")
        if self.mode == "cross":
            return scaled_dot_attention(q_v, k_r, v_r), scaled_dot_attention(q_r, k_v, v_v)
        return scaled_dot_attention(q_r, k_r, v_r), scaled_dot_attention(q_v, k_v, v_v)

    def forward(self, f_rgb: torch.Tensor, f_vi: torch.Tensor) -> torch.Tensor:
        return self.blend(*self.attended(f_rgb, f_vi))
