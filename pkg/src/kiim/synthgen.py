"""Procedural multi-state scene generator.

Each synthetic "state" has its own crop mix, crop -> irrigation probability
table, field geometry and spectral response. Fields are rectangles, except
sprinkler fields which become centre-pivot discs with probability
``pivot_prob``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .core import (
    CANONICAL_BANDS,
    CROP_GROUPS,
    DRIP,
    FLOOD,
    NON_IRRIGATED,
    SPRINKLER,
    DatasetManifest,
    ManifestError,
    Sample,
    write_samples,
)

logger = logging.getLogger(__name__)

G, K, B = len(CROP_GROUPS), 4, len(CANONICAL_BANDS)
MAX_RETRIES = 1000

BACKGROUND_SIGNATURE = (0.24, 0.23, 0.21, 0.27, 0.33, 0.30)

# Red, Green, Blue, NIR, SWIR1, SWIR2 per irrigation class before the crop tweak.
_CLASS_BASE = {
    NON_IRRIGATED: (0.17, 0.16, 0.14, 0.26, 0.30, 0.24),
    FLOOD: (0.07, 0.09, 0.08, 0.34, 0.11, 0.07),
    SPRINKLER: (0.05, 0.10, 0.05, 0.44, 0.21, 0.12),
    DRIP: (0.08, 0.10, 0.07, 0.30, 0.25, 0.19),
}


def default_signatures() -> np.ndarray:
    """G x K x 6 mean reflectance table.

    Flood fields get strong NIR/SWIR1 contrast (high NDWI); sprinkler fields
    high NDVI; drip fields a crop-dependent NDVI with weak NDWI.
    """
    sig = np.zeros((G, K, B))
    vigor = np.linspace(0.0, 1.0, G - 1)
    vigor = vigor[np.argsort(np.sin(np.arange(1, G) * 2.3))]  # decorrelate vigor from group index
    for g in range(G):
        v = vigor[g - 1] if g else 0.5
        for k, base in _CLASS_BASE.items():
            s = np.array(base, dtype=float)
            s[1] += 0.03 * (v - 0.5)  # crop-dependent green
            if k == DRIP:
                s[3] += 0.15 * v
                s[0] -= 0.03 * v
            else:
                s[3] += 0.04 * (v - 0.5)
            sig[g, k] = s
    sig[0, NON_IRRIGATED] = BACKGROUND_SIGNATURE
    return np.clip(sig, 0.0, 1.0)


def dominant_projection(dominant: dict, strength: float = 0.85, background_class: int = NON_IRRIGATED) -> np.ndarray:
    """G x K table where group g puts ``strength`` on ``dominant[g]`` and spreads the rest evenly."""
    P = np.full((G, K), 1.0 / K)
    for g, k in dominant.items():
        P[g] = (1 - strength) / (K - 1)
        P[g, k] = strength
    P[0] = 0.0
    P[0, background_class] = 1.0
    return P


@dataclass
class StateSpec:
    state_id: str
    crop_freq: List[float]
    P_true: List[List[float]]
    scene_size: int = 128
    patch_size: int = 64
    fields_per_scene: int = 24
    field_size: Tuple[int, int] = (5, 14)
    pivot_prob: float = 1.0
    noise_std: float = 0.03
    field_noise_std: float = 0.02
    signatures: Optional[List] = None

    def __post_init__(self):
        self.field_size = tuple(self.field_size)
        freq = np.asarray(self.crop_freq, float)
        P = np.asarray(self.P_true, float)
        if freq.shape != (G,) or freq.min() < 0 or freq[1:].sum() <= 0:
            raise ValueError("crop_freq must be a non-negative length-21 vector over crop groups")
        if P.shape != (G, K) or P.min() < 0 or not np.allclose(P.sum(1), 1.0):
            raise ValueError("P_true must be a row-stochastic 21 x 4 matrix")
        if self.scene_size % self.patch_size:
            raise ValueError("scene size must be a multiple of patch size")
        sig = self.signature_table()
        if sig.shape != (G, K, B) or sig.min() < 0 or sig.max() > 1:
            raise ValueError("signatures must be a 21 x 4 x 6 table in [0, 1]")
        lo, hi = self.field_size
        if not 1 <= lo <= hi:
            raise ValueError("field_size must be (min, max) with 1 <= min <= max")

    def signature_table(self) -> np.ndarray:
        return default_signatures() if self.signatures is None else np.asarray(self.signatures, float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["field_size"] = list(self.field_size)
        d["crop_freq"] = list(map(float, self.crop_freq))
        d["P_true"] = np.asarray(self.P_true, float).tolist()
        if self.signatures is not None:
            d["signatures"] = np.asarray(self.signatures, float).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StateSpec":
        return cls(**d)

    def save(self, path: os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path: os.PathLike) -> "StateSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FieldRecord:
    crop: int
    label: int
    shape: str
    center: Tuple[int, int]
    extent: Tuple[int, int]  # half-height/width, or (radius, radius) for discs


@dataclass
class Scene:
    bands: np.ndarray
    crop_map: np.ndarray
    land_mask: np.ndarray
    label_map: np.ndarray
    state_id: str
    spec_digest: str
    seed: int
    fields: List[FieldRecord] = field(default_factory=list)


def _field_mask(S: int, shape: str, cy: int, cx: int, a: int, b: int) -> np.ndarray:
    yy, xx = np.ogrid[:S, :S]
    if shape == "disc":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= a * a
    return (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)


def generate_scene(spec: StateSpec, seed: int) -> Scene:
    rng = np.random.default_rng([seed, int(spec.digest(), 16) % 2**32])
    S = spec.scene_size
    freq = np.asarray(spec.crop_freq, float).copy()
    freq[0] = 0.0
    freq /= freq.sum()
    P = np.asarray(spec.P_true, float)
    sig = spec.signature_table()
    lo, hi = spec.field_size

    crop = np.zeros((S, S), np.int64)
    label = np.zeros((S, S), np.int64)
    occupied = np.zeros((S, S), bool)
    means = np.broadcast_to(sig[0, NON_IRRIGATED], (S, S, B)).copy()
    fields: List[FieldRecord] = []
    for _ in range(spec.fields_per_scene):
        g = int(rng.choice(G, p=freq))
        k = int(rng.choice(K, p=P[g]))
        disc = k == SPRINKLER and rng.random() < spec.pivot_prob
        for _attempt in range(MAX_RETRIES):
            if disc:
                a = b = int(rng.integers(lo, hi + 1))
            else:
                a, b = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            if 2 * a + 1 > S or 2 * b + 1 > S:
                continue
            cy = int(rng.integers(a, S - a))
            cx = int(rng.integers(b, S - b))
            m = _field_mask(S, "disc" if disc else "rect", cy, cx, a, b)
            # one-pixel gap between fields keeps boundaries visible
            grown = m.copy()
            grown[1:] |= m[:-1]
            grown[:-1] |= m[1:]
            grown[:, 1:] |= m[:, :-1]
            grown[:, :-1] |= m[:, 1:]
            if not (grown & occupied).any():
                break
        else:
            warnings.warn(f"{spec.state_id}: placed {len(fields)} of {spec.fields_per_scene} fields", RuntimeWarning)
            break
        occupied |= m
        crop[m] = g
        label[m] = k
        offset = rng.normal(0.0, spec.field_noise_std, B) if spec.field_noise_std > 0 else 0.0
        means[m] = sig[g, k] + offset
        fields.append(FieldRecord(g, k, "disc" if disc else "rect", (cy, cx), (a, b)))
    if not fields:
        raise RuntimeError(f"{spec.state_id}: no field could be placed; lower density or field size")
    noise = rng.normal(0.0, spec.noise_std, (S, S, B)) if spec.noise_std > 0 else 0.0
    bands = np.clip(means + noise, 0.0, 1.0).astype(np.float32)
    return Scene(bands, crop, occupied.astype(np.int64), label, spec.state_id, spec.digest(), seed, fields)


def patchify(scene: Scene, patch_size: int) -> List[Sample]:
    S = scene.label_map.shape[0]
    if S % patch_size or scene.label_map.shape[1] % patch_size:
        raise ValueError(f"scene of size {scene.label_map.shape} is not divisible by patch size {patch_size}")
    out = []
    n = S // patch_size
    for r in range(n):
        for c in range(scene.label_map.shape[1] // patch_size):
            sl = (slice(r * patch_size, (r + 1) * patch_size), slice(c * patch_size, (c + 1) * patch_size))
            out.append(
                Sample(
                    scene.bands[sl].copy(),
                    scene.crop_map[sl].copy(),
                    scene.land_mask[sl].copy(),
                    scene.label_map[sl].copy(),
                    patch_id=f"{scene.state_id}-{scene.seed}-{r}-{c}",
                    state_id=scene.state_id,
                )
            )
    return out


def unpatchify(samples: Sequence[Sample], n_rows: int, n_cols: int):
    """Inverse of :func:`patchify` for row-major patch lists: (bands, crop, land, label)."""
    rows = []
    for name in ("bands", "crop_map", "land_mask", "label_map"):
        grid = [[getattr(samples[r * n_cols + c], name) for c in range(n_cols)] for r in range(n_rows)]
        rows.append(np.concatenate([np.concatenate(row, axis=1) for row in grid], axis=0))
    return tuple(rows)


def filter_patches(samples: Sequence[Sample], max_nonirrigated_fraction: float = 0.95) -> List[Sample]:
    if not 0 < max_nonirrigated_fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    return [
        s for s in samples if np.count_nonzero(s.label_map == NON_IRRIGATED) / s.label_map.size <= max_nonirrigated_fraction
    ]


def generate_patches(spec: StateSpec, n_patches: int, seed: int, max_nonirrigated_fraction: float = 0.95) -> List[Sample]:
    """Generate scenes until ``n_patches`` filtered patches exist (scene i uses seed*100003 + i)."""
    out: List[Sample] = []
    i = 0
    while len(out) < n_patches:
        if i > 50 * n_patches + 100:
            raise RuntimeError("filter rejects nearly every patch; increase field density")
        scene = generate_scene(spec, seed * 100003 + i)
        out.extend(filter_patches(patchify(scene, spec.patch_size), max_nonirrigated_fraction))
        i += 1
    return out[:n_patches]


def generate_dataset(spec: StateSpec, n_patches: int, seed: int, out_dir: os.PathLike) -> DatasetManifest:
    samples = generate_patches(spec, n_patches, seed)
    manifest = write_samples(samples, out_dir)
    manifest.save(Path(out_dir) / "manifest.json")
    return manifest


def build_multistate_dataset(
    state_manifests: Sequence[DatasetManifest],
    target_minority_class: int,
    imbalance_ratio: float = 2.0,
    seed: int = 0,
    n_minority: Optional[int] = None,
) -> DatasetManifest:
    """Pool states so that total = imbalance_ratio x (# patches containing the minority class).

    Every minority-containing patch is included (or ``n_minority`` of them,
    drawn at random); the rest is drawn without replacement from the other
    patches of all states.
    """
    if not state_manifests:
        raise ManifestError("no state manifests given")
    if imbalance_ratio < 1:
        raise ValueError("imbalance_ratio must be >= 1")
    pooled = state_manifests[0]
    for m in state_manifests[1:]:
        pooled = pooled.merge(m)
    rng = np.random.default_rng(seed)
    minority = sorted(r.patch_id for r in pooled.records if r.counts[target_minority_class] > 0)
    others = sorted(r.patch_id for r in pooled.records if r.counts[target_minority_class] == 0)
    if n_minority is not None:
        if n_minority > len(minority):
            raise ManifestError(f"insufficient minority patches: {len(minority)} available, {n_minority} requested")
        minority = sorted(rng.choice(minority, n_minority, replace=False).tolist())
    if not minority:
        raise ManifestError("insufficient minority patches: none contain the target class")
    total = int(round(imbalance_ratio * len(minority)))
    fill = total - len(minority)
    if fill > len(others):
        raise ManifestError(f"insufficient patches for requested total {total}: only {len(pooled)} available")
    chosen = minority + sorted(rng.choice(others, fill, replace=False).tolist()) if fill else minority
    return pooled.subset(chosen).with_split("train")


def default_state_specs(patch_size: int = 64, scene_patches: int = 2) -> List[StateSpec]:
    """Four synthetic states with different crop mixes, drip prevalence and farm sizes."""
    idx = {name: i for i, name in enumerate(CROP_GROUPS)}
    dominant = {
        idx["Alfalfa"]: FLOOD,
        idx["Cereals"]: SPRINKLER,
        idx["Cover Crop"]: NON_IRRIGATED,
        idx["Fibres"]: FLOOD,
        idx["Fruits"]: DRIP,
        idx["Grass"]: SPRINKLER,
        idx["Green House"]: DRIP,
        idx["Herb Group"]: DRIP,
        idx["Horticulture"]: DRIP,
        idx["Nursery"]: SPRINKLER,
        idx["Nuts"]: DRIP,
        idx["Oil-bearing crops"]: SPRINKLER,
        idx["Orchard"]: FLOOD,
        idx["Pulses"]: SPRINKLER,
        idx["Roots and Tubers"]: SPRINKLER,
        idx["Shrub Plants"]: NON_IRRIGATED,
        idx["Sugar Crops"]: FLOOD,
        idx["Vegetables"]: FLOOD,
        idx["Vineyard"]: DRIP,
        idx["UNK"]: NON_IRRIGATED,
    }
    drip_crops = [g for g, k in dominant.items() if k == DRIP]
    other_crops = [g for g, k in dominant.items() if k != DRIP]
    # S4 prefers drip for orchards and flood for cereals, unlike S1-S3
    s4_dominant = {**dominant, idx["Orchard"]: DRIP, idx["Cereals"]: FLOOD}
    scene = patch_size * scene_patches
    specs = []
    # (state, drip-crop share, farm size, pivot probability, crop -> dominant class)
    for sid, drip_share, size, pivot, dom in (
        ("S1", 0.30, (5, 13), 1.0, dominant),
        ("S2", 0.10, (4, 11), 0.8, dominant),
        ("S3", 0.05, (5, 13), 1.0, dominant),
        ("S4", 0.02, (4, 10), 0.6, s4_dominant),
    ):
        freq = np.zeros(G)
        freq[drip_crops] = drip_share / len(drip_crops)
        freq[other_crops] = (1 - drip_share) / len(other_crops)
        specs.append(
            StateSpec(
                sid,
                freq.tolist(),
                dominant_projection(dom).tolist(),
                scene_size=scene,
                patch_size=patch_size,
                fields_per_scene=int(round(24 * (scene / 128) ** 2)),
                field_size=tuple(max(2, round(v * patch_size / 64)) for v in size),
                pivot_prob=pivot,
            )
        )
    return specs
