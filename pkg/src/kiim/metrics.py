"""Confusion counting and per-class / macro segmentation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import IRRIGATION_CLASSES

METRIC_NAMES = ("precision", "recall", "dice", "iou")


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def zeros(cls, K: int = 4) -> "ConfusionCounts":
        return cls(np.zeros(K, np.int64), np.zeros(K, np.int64), np.zeros(K, np.int64))

    @property
    def K(self) -> int:
        return len(self.tp)

    @property
    def support(self) -> np.ndarray:
        return self.tp + self.fn

    @property
    def total(self) -> int:
        return int(self.support.sum())

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def __eq__(self, other) -> bool:
        return all(np.array_equal(getattr(self, a), getattr(other, a)) for a in ("tp", "fp", "fn"))


def accumulate_confusion(
    pred: np.ndarray,
    truth: np.ndarray,
    K: int = 4,
    region_mask: Optional[np.ndarray] = None,
    counts: Optional[ConfusionCounts] = None,
) -> ConfusionCounts:
    """Count tp/fp/fn per class, optionally only where ``region_mask`` is 1.

    Passing ``counts`` returns the sum with the new patch.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if region_mask is not None:
        keep = np.asarray(region_mask).astype(bool)
        if keep.shape != pred.shape:
            raise ValueError("region mask shape mismatch")
        pred, truth = pred[keep], truth[keep]
    pred, truth = pred.ravel().astype(np.int64), truth.ravel().astype(np.int64)
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise ValueError(f"{name} value out of range")
    cm = np.bincount(truth * K + pred, minlength=K * K).reshape(K, K)
    tp = np.diag(cm).copy()
    new = ConfusionCounts(tp, cm.sum(0) - tp, cm.sum(1) - tp)
    return new if counts is None else counts + new


def _ratio(num, den) -> Optional[float]:
    return float(num) / float(den) if den > 0 else None


@dataclass
class ClassMetrics:
    precision: Optional[float]
    recall: Optional[float]
    dice: Optional[float]
    iou: Optional[float]
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class MetricReport:
    classes: List[str]
    per_class: Dict[str, ClassMetrics]
    macro: Dict[str, Optional[float]]
    macro_irrigated: Dict[str, Optional[float]]
    pixels: int
    meta: dict = field(default_factory=dict)

    @property
    def miou(self) -> Optional[float]:
        return self.macro["iou"]

    def class_iou(self, name: str) -> Optional[float]:
        return self.per_class[name].iou

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "per_class": {k: vars(v) for k, v in self.per_class.items()},
            "macro": self.macro,
            "macro_irrigated": self.macro_irrigated,
            "pixels": self.pixels,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            d["classes"],
            {k: ClassMetrics(**v) for k, v in d["per_class"].items()},
            d["macro"],
            d["macro_irrigated"],
            d["pixels"],
            d.get("meta", {}),
        )

    def table(self) -> str:
        """Aligned text table: MIoU, then P/R/Dice/IoU per class."""

        def fmt(v):
            return "   -  " if v is None else f"{v:6.3f}"

        lines = [f"MIoU {fmt(self.macro['iou'])}   irrigated-only MIoU {fmt(self.macro_irrigated['iou'])}"]
        lines.append(f"{'class':<14} {'P':>6} {'R':>6} {'Dice':>6} {'IoU':>6}")
        for name in self.classes:
            m = self.per_class[name]
            lines.append(f"{name:<14} {fmt(m.precision)} {fmt(m.recall)} {fmt(m.dice)} {fmt(m.iou)}")
        lines.append(
            f"{'macro':<14} " + " ".join(fmt(self.macro[k]) for k in METRIC_NAMES)
        )
        return "\n".join(lines)


def _macro(per: Sequence[ClassMetrics]) -> Dict[str, Optional[float]]:
    out = {}
    for k in METRIC_NAMES:
        vals = [getattr(m, k) for m in per if getattr(m, k) is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def compute_metrics(counts: ConfusionCounts, classes: Sequence[str] = IRRIGATION_CLASSES) -> MetricReport:
    """Precision, recall, Dice and IoU per class.

    Dice is evaluated as 2|M&T| / (|M| + |T|), identical to 2PR/(P+R) wherever
    that is defined and also defined when only one of P, R is. A quantity
    whose denominator is zero is None and skipped by the macro means.
    """
    classes = list(classes)
    if len(classes) != counts.K:
        raise ValueError("class list does not match counts")
    per = {}
    for i, name in enumerate(classes):
        tp, fp, fn = int(counts.tp[i]), int(counts.fp[i]), int(counts.fn[i])
        per[name] = ClassMetrics(
            _ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(2 * tp, 2 * tp + fp + fn), _ratio(tp, tp + fp + fn),
            tp, fp, fn,
        )
    vals = [per[c] for c in classes]
    return MetricReport(classes, per, _macro(vals), _macro(vals[1:]), counts.total)
