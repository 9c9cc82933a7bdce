"""Raw-label consolidation tables for irrigation subtypes and crop names."""

from __future__ import annotations

import csv
import logging
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from ..core import CROP_GROUPS, IRRIGATION_CLASSES

logger = logging.getLogger(__name__)

REMOVED = -1
IRRIGATION_TARGETS = ("flood", "sprinkler", "drip", "removed")


class UnknownLabelError(KeyError):
    pass


def _norm(s: str) -> str:
    return " ".join(s.split()).casefold()


def _read_csv(path) -> Dict[str, str]:
    with open(path, newline="") as fh:
        return {row["raw_label"]: row["target"] for row in csv.DictReader(fh)}


@dataclass
class LabelMappingTable:
    irrigation_map: Dict[str, str]
    crop_map: Dict[str, str]
    strict: bool = False
    unknown_counts: Counter = field(default_factory=Counter)

    def __post_init__(self):
        bad = set(self.irrigation_map.values()) - set(IRRIGATION_TARGETS)
        if bad:
            raise ValueError(f"invalid irrigation targets: {sorted(bad)}")
        bad = set(self.crop_map.values()) - set(CROP_GROUPS[1:])
        if bad:
            raise ValueError(f"invalid crop groups: {sorted(bad)}")
        self._irr = {_norm(k): v for k, v in self.irrigation_map.items()}
        self._crop = {_norm(k): v for k, v in self.crop_map.items()}

    @classmethod
    def default(cls, strict: bool = False) -> "LabelMappingTable":
        data = resources.files("kiim.knowledge") / "data"
        return cls(
            _read_csv(data / "irrigation_labels.csv"),
            _read_csv(data / "crop_groups.csv"),
            strict=strict,
        )

    @classmethod
    def from_csv(cls, irrigation_csv: Union[str, Path], crop_csv: Union[str, Path], strict: bool = False):
        return cls(_read_csv(irrigation_csv), _read_csv(crop_csv), strict=strict)


def map_irrigation_label(raw: str, table: LabelMappingTable) -> int:
    """Class index of a raw irrigation subtype, or ``REMOVED``."""
    target = table._irr.get(_norm(raw))
    if target is None:
        if table.strict:
            raise UnknownLabelError(f"unknown irrigation label {raw!r}")
        table.unknown_counts[("irrigation", raw)] += 1
        logger.warning("unknown irrigation label %r treated as removed", raw)
        return REMOVED
    if target == "removed":
        return REMOVED
    return IRRIGATION_CLASSES.index(target)


def map_crop_label(raw: str, table: LabelMappingTable) -> int:
    """Crop-group index in [1, 20]; unknown names fall into UNK unless strict."""
    group = table._crop.get(_norm(raw))
    if group is None:
        if table.strict:
            raise UnknownLabelError(f"unknown crop label {raw!r}")
        table.unknown_counts[("crop", raw)] += 1
        group = "UNK"
    return CROP_GROUPS.index(group)


def consolidate_irrigation_raster(raw: np.ndarray, table: LabelMappingTable, nodata: Optional[str] = None) -> np.ndarray:
    """Map a raster of raw subtype strings to class indices.

    Removed subtypes and ``nodata`` cells become class 0 (non_irrigated).
    """
    raw = np.asarray(raw, dtype=object)
    uniq, inv = np.unique(raw, return_inverse=True)
    lut = np.array([0 if u == nodata else max(map_irrigation_label(u, table), 0) for u in uniq], dtype=np.int64)
    return lut[inv].reshape(raw.shape)
