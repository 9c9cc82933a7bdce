"""Shared hierarchical encoders.

Both encoders return a list of NCHW feature maps, finest first:
``[stem (H), stage1 (H/p), stage2 (H/2p), ...]``.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import trunc_normal_init


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    C = windows.shape[-1]
    x = windows.view(-1, H // ws, W // ws, ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, H, W, C)


def relative_position_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
    return rel[..., 0] * (2 * ws - 1) + rel[..., 1]


def shift_mask(H: int, W: int, ws: int, shift: int) -> torch.Tensor:
    img = torch.zeros(1, H, W, 1)
    cnt = 0
    for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
        for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            img[:, hs, wsl, :] = cnt
            cnt += 1
    win = window_partition(img, ws).squeeze(-1)
    diff = win[:, None, :] - win[:, :, None]
    return diff.ne(0).float() * -100.0


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, ws: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.bias_table = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, num_heads))
        nn.init.trunc_normal_(self.bias_table, std=0.02)
        self.register_buffer("rel_index", relative_position_index(ws), persistent=False)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        Bw, N, C = x.shape
        q, k, v = self.qkv(x).reshape(Bw, N, 3, self.num_heads, -1).permute(2, 0, 3, 1, 4)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.bias_table[self.rel_index.view(-1)].view(N, N, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(-1, nw, self.num_heads, N, N) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(-1, self.num_heads, N, N)
        out = (attn.softmax(-1) @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, resolution: int, ws: int, shift: int, mlp_ratio: float = 4.0):
        super().__init__()
        if resolution <= ws:
            ws, shift = resolution, 0
        self.ws, self.shift = ws, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, ws)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        if shift:
            self.register_buffer("mask", shift_mask(resolution, resolution, ws, shift), persistent=False)
        else:
            self.mask = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C)
        B, H, W, C = x.shape
        h = self.norm1(x)
        if self.shift:
            h = torch.roll(h, (-self.shift, -self.shift), (1, 2))
        h = window_reverse(self.attn(window_partition(h, self.ws), self.mask), self.ws, H, W)
        if self.shift:
            h = torch.roll(h, (self.shift, self.shift), (1, 2))
        x = x + h
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        return self.reduction(self.norm(x))


class Stem(nn.Module):
    """Full-resolution convolutional features used as the finest skip connection."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1), nn.GELU(), nn.Conv2d(out_ch, out_ch, 3, padding=1), nn.GELU()
        )

    def forward(self, x):
        return self.conv(x)


class SwinEncoder(nn.Module):
    def __init__(
        self,
        img_size: int,
        in_ch: int = 3,
        embed_dim: int = 32,
        depths: Sequence[int] = (2, 2, 2, 2),
        num_heads: Sequence[int] = (1, 2, 4, 8),
        window_size: int = 4,
        patch_size: int = 4,
    ):
        super().__init__()
        if img_size % (patch_size * 2 ** (len(depths) - 1)):
            raise ValueError(f"image size {img_size} not divisible by total stride")
        self.stem = Stem(in_ch, max(embed_dim // 2, 4))
        self.patch_embed = nn.Conv2d(in_ch, embed_dim, patch_size, stride=patch_size)
        self.embed_norm = nn.LayerNorm(embed_dim)
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        self.norms = nn.ModuleList()
        res, dim = img_size // patch_size, embed_dim
        for i, (d, h) in enumerate(zip(depths, num_heads)):
            if i > 0:
                self.merges.append(PatchMerging(dim))
                res, dim = res // 2, dim * 2
            blocks = [SwinBlock(dim, h, res, window_size, 0 if j % 2 == 0 else window_size // 2) for j in range(d)]
            self.stages.append(nn.Sequential(*blocks))
            self.norms.append(nn.LayerNorm(dim))
        self.out_channels = [self.stem.conv[0].out_channels] + [embed_dim * 2**i for i in range(len(depths))]
        self.apply(self._init)

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = [self.stem(x)]
        h = self.embed_norm(self.patch_embed(x).permute(0, 2, 3, 1))
        for i, stage in enumerate(self.stages):
            if i > 0:
                h = self.merges[i - 1](h)
            h = stage(h)
            feats.append(self.norms[i](h).permute(0, 3, 1, 2).contiguous())
        return feats


class ConvEncoder(nn.Module):
    """Plain convolutional backbone with the same stage-feature interface."""

    def __init__(self, img_size: int, in_ch: int = 3, embed_dim: int = 32, n_stages: int = 4, patch_size: int = 4):
        super().__init__()
        if img_size % (patch_size * 2 ** (n_stages - 1)):
            raise ValueError(f"image size {img_size} not divisible by total stride")
        self.stem = Stem(in_ch, max(embed_dim // 2, 4))
        self.stages = nn.ModuleList()
        prev = in_ch
        for i in range(n_stages):
            dim = embed_dim * 2**i
            stride = patch_size if i == 0 else 2
            self.stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, dim, stride, stride=stride),
                    nn.GELU(),
                    nn.Conv2d(dim, dim, 3, padding=1),
                    nn.GELU(),
                )
            )
            prev = dim
        self.out_channels = [self.stem.conv[0].out_channels] + [embed_dim * 2**i for i in range(n_stages)]

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = [self.stem(x)]
        h = x
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return feats


class UNetDecoder(nn.Module):
    """Upsample from the deepest map, concatenating each shallower skip on the way."""

    def __init__(self, channels: Sequence[int], num_classes: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList()
        prev = channels[-1]
        for ch in reversed(channels[:-1]):
            self.blocks.append(
                nn.Sequential(
                    nn.Conv2d(prev + ch, ch, 3, padding=1), nn.GELU(), nn.Conv2d(ch, ch, 3, padding=1), nn.GELU()
                )
            )
            prev = ch
        self.head = nn.Conv2d(prev, num_classes, 1)

    def features(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for block, skip in zip(self.blocks, reversed(feats[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, skip], 1))
        return x

    def forward(self, feats: Sequence[torch.Tensor]) -> torch.Tensor:
        return self.head(self.features(feats))
