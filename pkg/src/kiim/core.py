"""Data model shared by every other module: vocabularies, samples, manifests, configs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

IRRIGATION_CLASSES: Tuple[str, ...] = ("non_irrigated", "flood", "sprinkler", "drip")

CROP_GROUPS: Tuple[str, ...] = (
    "background",
    "Alfalfa",
    "Cereals",
    "Cover Crop",
    "Fibres",
    "Fruits",
    "Grass",
    "Green House",
    "Herb Group",
    "Horticulture",
    "Nursery",
    "Nuts",
    "Oil-bearing crops",
    "Orchard",
    "Pulses",
    "Roots and Tubers",
    "Shrub Plants",
    "Sugar Crops",
    "Vegetables",
    "Vineyard",
    "UNK",
)

CANONICAL_BANDS: Tuple[str, ...] = ("Red", "Green", "Blue", "NIR", "SWIR1", "SWIR2")

NON_IRRIGATED, FLOOD, SPRINKLER, DRIP = range(4)


class SampleValidationError(ValueError):
    """A patch failed validation; ``field`` names the offending raster."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ClassVocab:
    irrigation_classes: Tuple[str, ...] = IRRIGATION_CLASSES
    crop_groups: Tuple[str, ...] = CROP_GROUPS

    def __post_init__(self):
        object.__setattr__(self, "irrigation_classes", tuple(self.irrigation_classes))
        object.__setattr__(self, "crop_groups", tuple(self.crop_groups))
        if len(self.irrigation_classes) != 4:
            raise ValueError("irrigation vocabulary must have exactly 4 classes")
        if len(self.crop_groups) != 21:
            raise ValueError("crop vocabulary must have exactly 21 groups")
        if len(set(self.irrigation_classes)) != 4 or len(set(self.crop_groups)) != 21:
            raise ValueError("vocabulary names must be unique")
        if self.crop_groups[0] != "background":
            raise ValueError("crop group 0 must be background")

    @property
    def K(self) -> int:
        return len(self.irrigation_classes)

    @property
    def G(self) -> int:
        return len(self.crop_groups)

    def to_dict(self) -> dict:
        return {"irrigation_classes": list(self.irrigation_classes), "crop_groups": list(self.crop_groups)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassVocab":
        return cls(tuple(d["irrigation_classes"]), tuple(d["crop_groups"]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Sample:
    """One patch. Rasters are H x W (bands H x W x B, canonical order first)."""

    bands: np.ndarray
    crop_map: np.ndarray
    land_mask: np.ndarray
    label_map: np.ndarray
    patch_id: str = ""
    state_id: str = ""
    band_names: Tuple[str, ...] = CANONICAL_BANDS

    @property
    def size(self) -> int:
        return self.label_map.shape[0]

    def validate(self, vocab: Optional[ClassVocab] = None) -> "Sample":
        vocab = vocab or ClassVocab()
        if self.bands.ndim != 3:
            raise SampleValidationError("bands", "expected H x W x B raster")
        hw = self.label_map.shape
        if len(hw) != 2 or hw[0] != hw[1]:
            raise SampleValidationError("label", "label raster must be square H x W")
        for name, arr in (("bands", self.bands), ("crop", self.crop_map), ("land", self.land_mask)):
            if arr.shape[:2] != hw or (name != "bands" and arr.ndim != 2):
                raise SampleValidationError(name, f"shape mismatch: {arr.shape} vs label {hw}")
        if not np.all(np.isfinite(self.bands)):
            raise SampleValidationError("bands", "non-finite band values")
        if self.label_map.min() < 0 or self.label_map.max() >= vocab.K:
            raise SampleValidationError("label", "label out of range")
        if self.crop_map.min() < 0 or self.crop_map.max() >= vocab.G:
            raise SampleValidationError("crop", "crop out of range")
        if not np.isin(self.land_mask, (0, 1)).all():
            raise SampleValidationError("land", "land mask must be binary")
        return self

    def class_counts(self, K: int = 4) -> List[int]:
        return np.bincount(self.label_map.ravel(), minlength=K)[:K].tolist()


def _canonicalize_bands(bands: np.ndarray, names: Sequence[str]) -> Tuple[np.ndarray, Tuple[str, ...]]:
    names = list(names)
    if len(names) != bands.shape[2]:
        raise SampleValidationError("bands", "band name count does not match band raster depth")
    order = []
    for b in CANONICAL_BANDS:
        if b not in names:
            raise SampleValidationError("bands", f"missing band {b}")
        order.append(names.index(b))
    extra = [i for i in range(len(names)) if i not in order]
    idx = order + extra
    return bands[:, :, idx], tuple(names[i] for i in idx)


def save_sample(sample: Sample, path: os.PathLike, vocab: Optional[ClassVocab] = None) -> Path:
    """Write ``sample`` as an ``.npz`` container and return the path written."""
    vocab = vocab or ClassVocab()
    sample.validate(vocab)
    path = Path(path)
    meta = {
        "band_names": list(sample.band_names),
        "state_id": sample.state_id,
        "patch_id": sample.patch_id,
        "vocab_hash": vocab.digest(),
        "size": int(sample.size),
    }
    with open(path, "wb") as fh:
        np.savez_compressed(
            fh,
            bands=sample.bands.astype(np.float32),
            crop=sample.crop_map.astype(np.uint8),
            land=sample.land_mask.astype(np.uint8),
            label=sample.label_map.astype(np.uint8),
            meta=np.array(json.dumps(meta)),
        )
    return path


def load_sample(path: os.PathLike, vocab: Optional[ClassVocab] = None) -> Sample:
    vocab = vocab or ClassVocab()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"patch file not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        bands = z["bands"].astype(np.float32)
        crop = z["crop"].astype(np.int64)
        land = z["land"].astype(np.int64)
        label = z["label"].astype(np.int64)
        meta = json.loads(str(z["meta"]))
    if meta.get("vocab_hash") not in (None, vocab.digest()):
        raise SampleValidationError("meta", "vocabulary hash does not match")
    if bands.ndim != 3:
        raise SampleValidationError("bands", "expected H x W x B raster")
    bands, names = _canonicalize_bands(bands, meta["band_names"])
    outside = int(np.count_nonzero((bands < 0) | (bands > 1)))
    if outside:
        logger.warning("%s: clipped %d band values to [0, 1]", path.name, outside)
        bands = np.clip(bands, 0.0, 1.0)
    s = Sample(bands, crop, land, label, meta.get("patch_id", path.stem), meta.get("state_id", ""), names)
    return s.validate(vocab)


def one_hot_crop(crop_map: np.ndarray, G: int = 21) -> np.ndarray:
    """H x W integer map -> H x W x G binary raster."""
    crop_map = np.asarray(crop_map)
    if crop_map.size and (crop_map.min() < 0 or crop_map.max() >= G):
        raise ValueError("crop value out of range")
    return (crop_map[..., None] == np.arange(G)).astype(np.uint8)


@dataclass(frozen=True)
class PatchRecord:
    patch_id: str
    state_id: str
    file: str
    counts: Tuple[int, ...]
    size: int

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["counts"] = list(self.counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PatchRecord":
        return cls(d["patch_id"], d["state_id"], d["file"], tuple(d["counts"]), int(d["size"]))


@dataclass(frozen=True)
class DatasetManifest:
    """Immutable list of patch records under ``root``.

    ``splits`` maps patch_id -> split name. Patches without an entry are
    unassigned and count as training data.
    """

    root: str
    records: Tuple[PatchRecord, ...]
    vocab: ClassVocab = field(default_factory=ClassVocab)
    splits: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        ids = [r.patch_id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ManifestError("duplicate patch ids in manifest")
        for r in self.records:
            if sum(r.counts) != r.size * r.size:
                raise ManifestError(f"{r.patch_id}: class counts do not sum to H*W")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def patch_ids(self) -> List[str]:
        return [r.patch_id for r in self.records]

    def split_of(self, patch_id: str) -> str:
        return self.splits.get(patch_id, "train")

    def subset(self, patch_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(patch_ids)
        recs = tuple(r for r in self.records if r.patch_id in keep)
        return DatasetManifest(self.root, recs, self.vocab, {k: v for k, v in self.splits.items() if k in keep})

    def select_split(self, name: str) -> "DatasetManifest":
        return self.subset(r.patch_id for r in self.records if self.split_of(r.patch_id) == name)

    def with_split(self, name: str) -> "DatasetManifest":
        return DatasetManifest(self.root, self.records, self.vocab, {r.patch_id: name for r in self.records})

    def path_of(self, record: PatchRecord) -> Path:
        return Path(self.root) / record.file

    def load(self, i: int) -> Sample:
        return load_sample(self.path_of(self.records[i]), self.vocab)

    def samples(self) -> List[Sample]:
        return [self.load(i) for i in range(len(self))]

    def check_files(self) -> None:
        missing = [r.file for r in self.records if not self.path_of(r).exists()]
        if missing:
            raise ManifestError(f"missing patch files: {missing[:5]}")

    def merge(self, other: "DatasetManifest") -> "DatasetManifest":
        if other.vocab != self.vocab:
            raise ManifestError("vocabulary mismatch")
        if Path(other.root).resolve() == Path(self.root).resolve():
            recs = self.records + other.records
        else:
            root = Path(self.root).resolve()
            recs = self.records + tuple(
                dataclasses.replace(r, file=os.path.relpath(Path(other.root).resolve() / r.file, root))
                for r in other.records
            )
        return DatasetManifest(self.root, recs, self.vocab, {**self.splits, **other.splits})

    def to_dict(self) -> dict:
        return {
            "vocab": self.vocab.to_dict(),
            "patches": [r.to_dict() for r in self.records],
            "splits": dict(self.splits),
        }

    def save(self, path: os.PathLike) -> Path:
        """Write the manifest; file paths stay relative to ``root``."""
        path = Path(path)
        d = self.to_dict()
        d["root"] = os.path.relpath(Path(self.root).resolve(), path.parent.resolve())
        path.write_text(json.dumps(d, indent=1))
        return path

    @classmethod
    def load_json(cls, path: os.PathLike) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        root = (path.parent / d.get("root", ".")).resolve()
        return cls(
            str(root),
            tuple(PatchRecord.from_dict(p) for p in d["patches"]),
            ClassVocab.from_dict(d["vocab"]),
            dict(d.get("splits", {})),
        )


def record_for(sample: Sample, file: str, K: int = 4) -> PatchRecord:
    return PatchRecord(sample.patch_id, sample.state_id, file, tuple(sample.class_counts(K)), sample.size)


def write_samples(samples: Sequence[Sample], root: os.PathLike, vocab: Optional[ClassVocab] = None) -> DatasetManifest:
    """Save every sample under ``root`` and return a manifest over them."""
    vocab = vocab or ClassVocab()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    recs = []
    for s in samples:
        fname = f"{s.patch_id}.npz"
        save_sample(s, root / fname, vocab)
        recs.append(record_for(s, fname, vocab.K))
    return DatasetManifest(str(root), tuple(recs), vocab)


def split_dataset(
    manifest: DatasetManifest, train_fraction: float, seed: int
) -> Tuple[DatasetManifest, DatasetManifest]:
    """Random train/test partition with ``floor(N * train_fraction)`` training patches."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    if len(manifest) == 0:
        raise ManifestError("cannot split an empty manifest")
    ids = sorted(manifest.patch_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(np.floor(len(ids) * train_fraction))
    train_ids = [ids[i] for i in perm[:n_train]]
    test_ids = [ids[i] for i in perm[n_train:]]
    return manifest.subset(train_ids).with_split("train"), manifest.subset(test_ids).with_split("test")


def kfold_splits(
    manifest: DatasetManifest, k: int, seed: int, stratified: bool = False
) -> List[Tuple[DatasetManifest, DatasetManifest]]:
    """``k`` (train, val) pairs. Stratification uses the rarest class present in each patch."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if len(manifest) < k:
        raise ManifestError("fewer patches than folds")
    ids = sorted(manifest.patch_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    order = [ids[i] for i in perm]
    if stratified:
        by_id = {r.patch_id: r for r in manifest.records}

        def stratum(pid: str) -> int:
            present = [c for c, n in enumerate(by_id[pid].counts) if n > 0]
            return -max(present)

        order.sort(key=stratum)  # stable: keeps the random order within a stratum
    folds = [order[i::k] for i in range(k)]
    out = []
    for i in range(k):
        val = set(folds[i])
        train = [p for p in order if p not in val]
        out.append((manifest.subset(train).with_split("train"), manifest.subset(val).with_split("val")))
    return out


FUSION_MODES = ("cross", "self", "none")
# fields that change parameter shapes; a checkpoint only loads into a matching model
ARCH_FIELDS = ("encoder", "embed_dim", "depths", "num_heads", "window_size", "patch_size", "attn_hidden")


@dataclass
class ExperimentConfig:
    # encoder
    encoder: str = "swin"
    embed_dim: int = 32
    depths: Tuple[int, ...] = (2, 2, 2, 2)
    num_heads: Tuple[int, ...] = (1, 2, 4, 8)
    window_size: int = 4
    patch_size: int = 4
    attn_hidden: int = 16
    # objective
    loss_alpha: float = 0.5
    # optimisation
    lr: float = 2e-4
    batch_size: int = 16
    epochs: int = 10
    max_steps: Optional[int] = None
    eval_every: Optional[int] = None
    # ablation flags
    use_attention_module: bool = True
    use_projection_module: bool = True
    use_land_masked_dice: bool = True
    fusion_mode: str = "cross"
    attention_apply: str = "input"
    ensemble_mode: str = "geometric"
    share_qkv: bool = False
    # initialisation
    alpha_fusion_init: float = 0.8
    ensemble_init: Tuple[float, float] = (0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        self.depths = tuple(self.depths)
        self.num_heads = tuple(self.num_heads)
        self.ensemble_init = tuple(self.ensemble_init)
        if not 0.0 <= self.loss_alpha <= 1.0:
            raise ValueError("loss_alpha must lie in [0, 1]")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}")
        if self.encoder not in ("swin", "conv"):
            raise ValueError("encoder must be 'swin' or 'conv'")
        if self.attention_apply not in ("input", "pre_logits"):
            raise ValueError("attention_apply must be 'input' or 'pre_logits'")
        if self.ensemble_mode not in ("geometric", "arithmetic"):
            raise ValueError("ensemble_mode must be 'geometric' or 'arithmetic'")
        if len(self.depths) != len(self.num_heads):
            raise ValueError("depths and num_heads must have equal length")
        if len(self.ensemble_init) != 2:
            raise ValueError("ensemble_init needs two weights")

    @property
    def dims(self) -> Tuple[int, ...]:
        return tuple(self.embed_dim * 2**i for i in range(len(self.depths)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def architecture(self) -> dict:
        return {k: getattr(self, k) for k in ARCH_FIELDS}

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
