"""Two-phase training: multi-state pretraining, then state-adaptive fine-tuning."""

from __future__ import annotations

import math
from typing import Optional, Tuple

import numpy as np

from ..core import DatasetManifest, ExperimentConfig, ManifestError
from ..knowledge import ProjectionMatrix
from .checkpoint import Checkpoint
from .train import RunReport, projection_for, train


def fraction_tag(fraction: float) -> str:
    return "full fine-tune" if fraction >= 1.0 else f"Base + {round(fraction * 100)}% data"


def take_fraction(manifest: DatasetManifest, fraction: float, seed: int) -> DatasetManifest:
    """Deterministic random subset of ``floor(N * fraction)`` patches (at least one)."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    if fraction >= 1.0:
        return manifest
    ids = sorted(manifest.patch_ids)
    n = max(1, math.floor(len(ids) * fraction))
    chosen = np.random.default_rng(seed).permutation(len(ids))[:n]
    return manifest.subset(ids[i] for i in chosen)


def finetune(
    pretrained: Checkpoint,
    target_train: DatasetManifest,
    fraction: float,
    config: Optional[ExperimentConfig] = None,
    target_val: Optional[DatasetManifest] = None,
    target_P: Optional[ProjectionMatrix] = None,
) -> Tuple[Checkpoint, RunReport]:
    """Continue training from ``pretrained`` on a fraction of the target state's data.

    Works on a copy, so the pretrained checkpoint is never modified. The
    target state's projection matrix defaults to one estimated from the
    fine-tuning subset.
    """
    if target_train.vocab != pretrained.vocab:
        raise ManifestError("vocabulary mismatch between pretraining and target data")
    config = config or pretrained.config
    subset = take_fraction(target_train, fraction, config.seed)
    P = target_P if target_P is not None else projection_for(subset)
    ckpt, report = train(config, subset, target_val, P, init=pretrained.copy())
    report.tag = fraction_tag(fraction)
    report.extra.update(fraction=fraction, finetune_patches=len(subset))
    return ckpt, report


def pretrain_then_finetune(
    pretrain_manifest: DatasetManifest,
    target_state_manifest: DatasetManifest,
    fraction: float,
    config: ExperimentConfig,
    *,
    finetune_config: Optional[ExperimentConfig] = None,
    pretrain_val: Optional[DatasetManifest] = None,
    target_val: Optional[DatasetManifest] = None,
    target_P: Optional[ProjectionMatrix] = None,
) -> Tuple[Checkpoint, RunReport]:
    """Phase 1 on the pooled multi-state manifest, phase 2 on the target state.

    The phase-1 checkpoint and report are returned inside
    ``report.extra['phase1']`` / ``report.extra['phase1_checkpoint']``.
    """
    if pretrain_manifest.vocab != target_state_manifest.vocab:
        raise ManifestError("vocabulary mismatch between phases")
    phase1, rep1 = train(config, pretrain_manifest, pretrain_val)
    rep1.tag = "pretrain"
    ckpt, report = finetune(phase1, target_state_manifest, fraction, finetune_config or config, target_val, target_P)
    report.extra["phase1"] = rep1.to_dict()
    report.extra["phase1_checkpoint"] = phase1
    return ckpt, report
