"""Read-only evaluation and prediction rendering."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

from ..core import DatasetManifest, ManifestError, Sample
from ..knowledge import ProjectionMatrix
from ..metrics import ConfusionCounts, MetricReport, accumulate_confusion, compute_metrics
from ..network import KIIM, forward_sample
from ..spectral import assemble_streams
from .checkpoint import Checkpoint
from .data import PatchTensors

# non_irrigated gray, flood blue, sprinkler green, drip red
PALETTE = np.array([[128, 128, 128], [0, 90, 255], [0, 170, 60], [220, 30, 30]], dtype=np.uint8)
MARGIN_COLOR = (255, 255, 255)


def _projection_tensor(P, dtype) -> torch.Tensor:
    return torch.tensor(np.asarray(getattr(P, "P", P)), dtype=dtype)


@torch.no_grad()
def predict_classes(model: KIIM, data: PatchTensors, P, batch_size: int = 16) -> np.ndarray:
    model.eval()
    dtype = next(model.parameters()).dtype
    Pt = _projection_tensor(P, dtype)
    out = []
    for start in range(0, len(data), batch_size):
        rgb, vi, crop, land, _ = data.batch(range(start, min(start + batch_size, len(data))))
        out.append(model(rgb, vi, crop, land, Pt).log_probs.argmax(1).numpy())
    return np.concatenate(out)


def confusion_over(model: KIIM, data: PatchTensors, P, K: int = 4) -> ConfusionCounts:
    pred = predict_classes(model, data, P)
    return accumulate_confusion(pred, data.label.numpy(), K)


def _resolve(checkpoint: Union[Checkpoint, os.PathLike]) -> Checkpoint:
    return checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint)


def evaluate(
    checkpoint: Union[Checkpoint, os.PathLike],
    manifest: DatasetManifest,
    P: Optional[ProjectionMatrix] = None,
    which: str = "best",
) -> MetricReport:
    """Macro and per-class metrics of the checkpoint over every patch of ``manifest``.

    ``P`` overrides the projection stored in the checkpoint (e.g. a target
    state's own prior for zero-shot evaluation).
    """
    ckpt = _resolve(checkpoint)
    if len(manifest) == 0:
        raise ManifestError("cannot evaluate on an empty manifest")
    if manifest.vocab != ckpt.vocab:
        raise ManifestError("manifest vocabulary does not match checkpoint")
    P = P if P is not None else ckpt.projection
    if P is None:
        raise ValueError("no projection matrix given or stored in checkpoint")
    data = PatchTensors.from_manifest(manifest)
    if data.img_size != ckpt.img_size:
        raise ManifestError(f"patch size {data.img_size} does not match checkpoint ({ckpt.img_size})")
    model = ckpt.build_model(which)
    report = compute_metrics(confusion_over(model, data, P, ckpt.vocab.K), ckpt.vocab.irrigation_classes)
    report.meta.update({"patches": len(manifest), "projection_state": P.state_id})
    return report


def colorize(class_map: np.ndarray) -> np.ndarray:
    return PALETTE[np.asarray(class_map)]


def decode_palette(rgb: np.ndarray) -> np.ndarray:
    """Inverse of :func:`colorize`; raises on colors outside the palette."""
    rgb = np.asarray(rgb)[..., :3]
    match = (rgb[..., None, :] == PALETTE[None, None]).all(-1)
    if not match.any(-1).all():
        raise ValueError("image contains colors outside the class palette")
    return match.argmax(-1)


def predict_render(
    checkpoint: Union[Checkpoint, os.PathLike],
    sample: Sample,
    out_path: os.PathLike,
    P: Optional[ProjectionMatrix] = None,
    side_by_side: bool = False,
    margin: int = 4,
    dump_indices: bool = False,
) -> Path:
    """Write the arg-max class map as a PNG (prediction | ground truth when ``side_by_side``)."""
    ckpt = _resolve(checkpoint)
    P = P if P is not None else ckpt.projection
    out = forward_sample(ckpt.build_model(), sample, P)
    img = colorize(out.ensemble_probs.argmax(-1))
    if side_by_side:
        H, W, _ = img.shape
        canvas = np.empty((H, 2 * W + margin, 3), np.uint8)
        canvas[:] = MARGIN_COLOR
        canvas[:, :W] = img
        canvas[:, W + margin :] = colorize(sample.label_map)
        img = canvas
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(out_path)
    if dump_indices:
        _, vi = assemble_streams(sample)
        for i, name in enumerate(ckpt.vi_channels):
            gray = np.round(vi[..., i] * 255).astype(np.uint8)
            Image.fromarray(gray).save(out_path.with_name(f"{out_path.stem}_{name.lower()}.png"))
    return out_path
