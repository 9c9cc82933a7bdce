"""Normalized-difference indices and the two model input streams."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .core import CANONICAL_BANDS, Sample, SampleValidationError

VI_CHANNELS: Tuple[str, ...] = ("NDVI", "NDWI", "NDTI")
DEFAULT_EPS = 1e-6


@dataclass
class IndexMap:
    values: np.ndarray
    kind: str
    eps: float


def normalized_difference(a, b, eps: float = DEFAULT_EPS) -> np.ndarray:
    """(a - b) / (a + b), set to 0 where |a + b| < eps, clipped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    den = a + b
    ok = np.abs(den) >= eps
    out = np.zeros(np.broadcast(a, b).shape)
    np.divide(a - b, den, out=out, where=ok)
    return np.clip(out, -1.0, 1.0)


def compute_ndvi(nir, red, eps: float = DEFAULT_EPS) -> IndexMap:
    return IndexMap(normalized_difference(nir, red, eps), "NDVI", eps)


def compute_ndwi(nir, swir1, eps: float = DEFAULT_EPS) -> IndexMap:
    return IndexMap(normalized_difference(nir, swir1, eps), "NDWI", eps)


def compute_ndti(swir1, swir2, eps: float = DEFAULT_EPS) -> IndexMap:
    return IndexMap(normalized_difference(swir1, swir2, eps), "NDTI", eps)


def _band(sample: Sample, name: str) -> np.ndarray:
    names = list(sample.band_names)
    if name not in names or names.index(name) >= sample.bands.shape[2]:
        raise SampleValidationError("bands", f"missing band {name}")
    return sample.bands[:, :, names.index(name)]


def assemble_streams(sample: Sample, eps: float = DEFAULT_EPS) -> Tuple[np.ndarray, np.ndarray]:
    """Return (rgb, vi), both H x W x 3 float32 in [0, 1].

    vi channels are NDVI, NDWI, NDTI, each mapped from [-1, 1] onto [0, 1].
    """
    b = {name: _band(sample, name) for name in CANONICAL_BANDS}
    rgb = np.stack([b["Red"], b["Green"], b["Blue"]], axis=-1)
    vi = np.stack(
        [
            compute_ndvi(b["NIR"], b["Red"], eps).values,
            compute_ndwi(b["NIR"], b["SWIR1"], eps).values,
            compute_ndti(b["SWIR1"], b["SWIR2"], eps).values,
        ],
        axis=-1,
    )
    return rgb.astype(np.float32), ((vi + 1.0) / 2.0).astype(np.float32)
