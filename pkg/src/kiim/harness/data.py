"""In-memory tensor view of a manifest for batching."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..core import DatasetManifest, Sample
from ..spectral import assemble_streams


class PatchTensors:
    """All patches of a manifest stacked once; ``batch(idx)`` returns model inputs.

    Crop maps stay integer and are one-hot encoded per batch.
    """

    def __init__(self, samples: Sequence[Sample], G: int = 21, dtype=torch.float32):
        if not samples:
            raise ValueError("no samples")
        self.G = G
        self.dtype = dtype
        self.patch_ids = [s.patch_id for s in samples]
        rgb, vi = zip(*(assemble_streams(s) for s in samples))
        self.rgb = torch.as_tensor(np.moveaxis(np.stack(rgb), -1, 1).copy(), dtype=dtype)
        self.vi = torch.as_tensor(np.moveaxis(np.stack(vi), -1, 1).copy(), dtype=dtype)
        self.land = torch.as_tensor(np.stack([s.land_mask for s in samples]), dtype=dtype)
        self.label = torch.as_tensor(np.stack([s.label_map for s in samples]), dtype=torch.long)
        self.crop = torch.as_tensor(np.stack([s.crop_map for s in samples]), dtype=torch.long)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, dtype=torch.float32) -> "PatchTensors":
        return cls(manifest.samples(), manifest.vocab.G, dtype)

    def __len__(self) -> int:
        return len(self.patch_ids)

    @property
    def img_size(self) -> int:
        return self.label.shape[-1]

    def batch(self, idx):
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        crop = F.one_hot(self.crop[idx], self.G).permute(0, 3, 1, 2).to(self.dtype)
        return self.rgb[idx], self.vi[idx], crop, self.land[idx], self.label[idx]
