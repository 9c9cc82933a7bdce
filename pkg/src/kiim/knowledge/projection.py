"""Crop-group -> irrigation-class prior built from labelled area statistics."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import CROP_GROUPS, IRRIGATION_CLASSES, DatasetManifest, ManifestError


@dataclass
class AreaStats:
    """``areas[g, k]``: pixel count of crop group g under irrigation class k."""

    areas: np.ndarray
    state_id: str = ""

    def __post_init__(self):
        self.areas = np.asarray(self.areas, dtype=np.float64)
        if self.areas.ndim != 2:
            raise ValueError("areas must be a G x K matrix")
        if not np.all(np.isfinite(self.areas)):
            raise ValueError("areas must be finite")

    def digest(self) -> str:
        return hashlib.sha256(self.areas.tobytes()).hexdigest()[:16]

    def __add__(self, other: "AreaStats") -> "AreaStats":
        return AreaStats(self.areas + other.areas, self.state_id or other.state_id)


@dataclass(frozen=True)
class ProjectionMatrix:
    P: np.ndarray
    state_id: str = ""
    source_digest: str = ""
    crop_groups: Sequence[str] = CROP_GROUPS
    irrigation_classes: Sequence[str] = IRRIGATION_CLASSES

    def __post_init__(self):
        P = np.array(self.P, dtype=np.float64)
        P.setflags(write=False)
        object.__setattr__(self, "P", P)
        if P.shape != (len(self.crop_groups), len(self.irrigation_classes)):
            raise ValueError(f"projection shape {P.shape} does not match vocabulary")
        if P.min() < 0 or P.max() > 1 or not np.allclose(P.sum(axis=1), 1.0, atol=1e-9, rtol=0):
            raise ValueError("projection rows must be probability vectors")

    @property
    def G(self) -> int:
        return self.P.shape[0]

    @property
    def K(self) -> int:
        return self.P.shape[1]

    def digest(self) -> str:
        return hashlib.sha256(self.P.tobytes() + self.state_id.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "state_id": self.state_id,
            "source_digest": self.source_digest,
            "crop_groups": list(self.crop_groups),
            "irrigation_classes": list(self.irrigation_classes),
            "rows": self.P.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionMatrix":
        return cls(
            np.array(d["rows"]),
            d.get("state_id", ""),
            d.get("source_digest", ""),
            tuple(d["crop_groups"]),
            tuple(d["irrigation_classes"]),
        )

    def save(self, path: os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path: os.PathLike) -> "ProjectionMatrix":
        return cls.from_dict(json.loads(Path(path).read_text()))


def count_areas(crop_map: np.ndarray, label_map: np.ndarray, G: int = 21, K: int = 4) -> np.ndarray:
    idx = np.asarray(crop_map).ravel() * K + np.asarray(label_map).ravel()
    return np.bincount(idx, minlength=G * K).reshape(G, K).astype(np.float64)


def estimate_area_stats(manifest: DatasetManifest) -> AreaStats:
    """Sum crop x irrigation pixel counts over the manifest's training patches."""
    if len(manifest) == 0:
        raise ManifestError("cannot estimate area statistics from an empty manifest")
    train = manifest.select_split("train")
    if len(train) == 0:
        raise ManifestError("projection must be built from training data")
    G, K = manifest.vocab.G, manifest.vocab.K
    areas = np.zeros((G, K))
    states = set()
    for i in range(len(train)):
        s = train.load(i)
        areas += count_areas(s.crop_map, s.label_map, G, K)
        states.add(s.state_id)
    return AreaStats(areas, states.pop() if len(states) == 1 else "+".join(sorted(states)))


def build_projection_matrix(stats: AreaStats, K: int = 4) -> ProjectionMatrix:
    """Row-normalize the area table; rows with no area become uniform 1/K."""
    A = stats.areas
    if A.shape[1] != K:
        raise ValueError(f"area table has {A.shape[1]} classes, expected {K}")
    if np.any(A < 0):
        raise ValueError("negative area entry")
    total = A.sum(axis=1, keepdims=True)
    P = np.full_like(A, 1.0 / K)
    pos = total[:, 0] > 0
    P[pos] = A[pos] / total[pos]
    crop_groups = CROP_GROUPS if A.shape[0] == len(CROP_GROUPS) else tuple(f"g{i}" for i in range(A.shape[0]))
    irr = IRRIGATION_CLASSES if K == len(IRRIGATION_CLASSES) else tuple(f"k{i}" for i in range(K))
    return ProjectionMatrix(P, stats.state_id, stats.digest(), crop_groups, irr)


def project_crop_mask(crop_onehot: np.ndarray, P: ProjectionMatrix) -> np.ndarray:
    """H x W x G one-hot crop raster -> H x W x K irrigation prior."""
    crop_onehot = np.asarray(crop_onehot)
    if crop_onehot.shape[-1] != P.G:
        raise ValueError(f"crop raster has {crop_onehot.shape[-1]} groups, projection has {P.G}")
    return crop_onehot.astype(np.float64) @ P.P
