"""The full two-stream model with projection prior and learnable ensemble."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from ..core import ClassVocab, ExperimentConfig, Sample, one_hot_crop
from ..spectral import assemble_streams
from .attention import BidirectionalFusion, SoftAttention
from .encoder import ConvEncoder, SwinEncoder, UNetDecoder

ENSEMBLE_EPS = 1e-8


class Ensemble(nn.Module):
    """Learnable two-way mixture of the stream prediction and the projection prior.

    Weights are softmax(w). The default geometric mode sums log-probabilities
    and renormalizes; ``arithmetic`` mixes probabilities directly.
    """

    def __init__(self, init=(0.5, 0.5), mode: str = "geometric", eps: float = ENSEMBLE_EPS):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([float(v) for v in init]))
        self.mode = mode
        self.eps = eps

    def mixing_weights(self) -> torch.Tensor:
        return self.w.softmax(0)

    def forward(self, stream_logits: torch.Tensor, projection_probs: torch.Tensor) -> torch.Tensor:
        """Return log-probabilities over the class axis (dim 1)."""
        if stream_logits.shape != projection_probs.shape:
            raise ValueError("stream and projection shapes differ")
        u = self.mixing_weights()
        if self.mode == "geometric":
            mix = u[0] * stream_logits.log_softmax(1) + u[1] * torch.log(projection_probs + self.eps)
            return mix.log_softmax(1)
        probs = u[0] * stream_logits.softmax(1) + u[1] * projection_probs
        return torch.log(probs.clamp_min(self.eps))


def ensemble(stream_logits, projection_probs, w, mode: str = "geometric") -> np.ndarray:
    """Array convenience wrapper over :class:`Ensemble` for H x W x K inputs."""
    ens = Ensemble(w, mode).double()
    with torch.no_grad():
        s = torch.as_tensor(np.moveaxis(np.asarray(stream_logits, dtype=np.float64), -1, 0))[None]
        p = torch.as_tensor(np.moveaxis(np.asarray(projection_probs, dtype=np.float64), -1, 0))[None]
        return np.moveaxis(ens(s, p).exp()[0].numpy(), 0, -1)


@dataclass
class KIIMOutput:
    attention_map: torch.Tensor  # (B, H, W)
    stream_logits: torch.Tensor  # (B, K, H, W)
    projection_probs: torch.Tensor  # (B, K, H, W)
    log_probs: torch.Tensor  # (B, K, H, W), ensemble output

    @property
    def ensemble_probs(self) -> torch.Tensor:
        return self.log_probs.exp()


@dataclass
class ModelOutput:
    """Per-patch output as H x W (x K) arrays."""

    attention_map: np.ndarray
    stream_logits: np.ndarray
    projection_probs: np.ndarray
    ensemble_probs: np.ndarray


class KIIM(nn.Module):
    def __init__(self, config: ExperimentConfig, img_size: int, vocab: Optional[ClassVocab] = None):
        super().__init__()
        self.config = config
        self.vocab = vocab or ClassVocab()
        self.img_size = img_size
        K = self.vocab.K
        self.attention = SoftAttention(config.attn_hidden)
        if config.encoder == "swin":
            self.encoder = SwinEncoder(
                img_size, 3, config.embed_dim, config.depths, config.num_heads, config.window_size, config.patch_size
            )
        else:
            self.encoder = ConvEncoder(img_size, 3, config.embed_dim, len(config.depths), config.patch_size)
        self.fusion = BidirectionalFusion(
            self.encoder.out_channels[-1], config.fusion_mode, config.alpha_fusion_init, config.share_qkv
        )
        self.decoder = UNetDecoder(self.encoder.out_channels, K)
        self.ensemble = Ensemble(config.ensemble_init, config.ensemble_mode)

    def fuse(self, feats_rgb, feats_vi):
        """Deepest stage through the fusion module; shallower skips are alpha-blended."""
        fused = [self.fusion.blend(a, b) for a, b in zip(feats_rgb[:-1], feats_vi[:-1])]
        fused.append(self.fusion(feats_rgb[-1], feats_vi[-1]))
        return fused

    def forward(
        self,
        rgb: torch.Tensor,
        vi: torch.Tensor,
        crop_onehot: torch.Tensor,
        land_mask: torch.Tensor,
        P: torch.Tensor,
    ) -> KIIMOutput:
        """rgb, vi: (B, 3, H, W); crop_onehot: (B, G, H, W); land_mask: (B, H, W); P: (G, K)."""
        cfg = self.config
        B, _, H, W = rgb.shape
        if crop_onehot.shape[1] != P.shape[0]:
            raise ValueError(f"crop raster has {crop_onehot.shape[1]} groups, projection has {P.shape[0]}")
        if P.shape[1] != self.vocab.K:
            raise ValueError("projection class count does not match vocabulary")
        if cfg.use_attention_module:
            att = self.attention(land_mask)
        else:
            att = torch.ones(B, H, W, dtype=rgb.dtype, device=rgb.device)
        if cfg.use_attention_module and cfg.attention_apply == "input":
            rgb = rgb * att.unsqueeze(1)
            vi = vi * att.unsqueeze(1)
        # one encoder pass over both streams keeps the weights literally shared
        feats = self.encoder(torch.cat([rgb, vi], 0))
        fused = self.fuse([f[:B] for f in feats], [f[B:] for f in feats])
        h = self.decoder.features(fused)
        if cfg.use_attention_module and cfg.attention_apply == "pre_logits":
            h = h * att.unsqueeze(1)
        logits = self.decoder.head(h)
        if cfg.use_projection_module:
            proj = torch.einsum("bghw,gk->bkhw", crop_onehot.to(logits.dtype), P.to(logits.dtype))
            log_probs = self.ensemble(logits, proj)
        else:
            proj = torch.full_like(logits, 1.0 / logits.shape[1])
            log_probs = logits.log_softmax(1)
        return KIIMOutput(att, logits, proj, log_probs)


def sample_tensors(samples, G: int = 21, dtype=torch.float32):
    """Stack samples into (rgb, vi, crop_onehot, land, label) tensors."""
    rgb, vi, crop, land, label = [], [], [], [], []
    for s in samples:
        r, v = assemble_streams(s)
        rgb.append(np.moveaxis(r, -1, 0))
        vi.append(np.moveaxis(v, -1, 0))
        crop.append(np.moveaxis(one_hot_crop(s.crop_map, G), -1, 0))
        land.append(s.land_mask)
        label.append(s.label_map)
    return (
        torch.as_tensor(np.stack(rgb), dtype=dtype),
        torch.as_tensor(np.stack(vi), dtype=dtype),
        torch.as_tensor(np.stack(crop), dtype=dtype),
        torch.as_tensor(np.stack(land), dtype=dtype),
        torch.as_tensor(np.stack(label), dtype=torch.long),
    )


@torch.no_grad()
def forward_sample(model: KIIM, sample: Sample, P) -> ModelOutput:
    """Run one sample through ``model``; ``P`` is a ProjectionMatrix or G x K array."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    rgb, vi, crop, land, _ = sample_tensors([sample], model.vocab.G, dtype)
    Pm = torch.tensor(np.asarray(getattr(P, "P", P)), dtype=dtype)
    out = model(rgb, vi, crop, land, Pm)
    model.train(was_training)

    def hwk(t):
        return np.moveaxis(t[0].double().numpy(), 0, -1)

    return ModelOutput(
        out.attention_map[0].double().numpy(),
        hwk(out.stream_logits),
        hwk(out.projection_probs),
        hwk(out.ensemble_probs),
    )
