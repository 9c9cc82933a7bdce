"""Training loop and run reports."""

from __future__ import annotations

import copy
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch

from .. import objective
from ..core import DatasetManifest, ExperimentConfig, ManifestError
from ..knowledge import ProjectionMatrix, build_projection_matrix, estimate_area_stats
from ..metrics import compute_metrics
from ..network import KIIM
from .checkpoint import Checkpoint, TrainState
from .data import PatchTensors
from .evaluate import confusion_over

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at step {step}")
        self.step = step


@dataclass
class RunReport:
    config_digest: str
    config: dict
    metrics: Dict[str, dict] = field(default_factory=dict)
    loss_trajectory: List[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    selected: dict = field(default_factory=dict)
    tag: str = ""
    extra: dict = field(default_factory=dict)

    def miou(self, split: str = "val") -> Optional[float]:
        m = self.metrics.get(split)
        return None if m is None else m["macro"]["iou"]

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


def projection_for(manifest: DatasetManifest) -> ProjectionMatrix:
    return build_projection_matrix(estimate_area_stats(manifest), manifest.vocab.K)


def _as_data(x) -> Optional[PatchTensors]:
    if x is None or isinstance(x, PatchTensors):
        return x
    if len(x) == 0:
        raise ManifestError("empty manifest")
    return PatchTensors.from_manifest(x)


def _batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    # order depends only on (seed, epoch), so a resumed run draws the same batches
    per_epoch = math.ceil(n / batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[pos * batch_size : (pos + 1) * batch_size]


def train(
    config: ExperimentConfig,
    train_manifest,
    val_manifest=None,
    P: Optional[ProjectionMatrix] = None,
    *,
    init: Optional[Checkpoint] = None,
    resume: Optional[Checkpoint] = None,
    stop_after: Optional[int] = None,
    out_dir: Optional[os.PathLike] = None,
    dtype=torch.float32,
) -> Tuple[Checkpoint, RunReport]:
    """Minimize the composite loss of the ensemble output with Adam.

    ``train_manifest``/``val_manifest`` may be manifests or preloaded
    :class:`PatchTensors`. ``init`` starts from another checkpoint's best
    weights (fine-tuning); ``resume`` continues an interrupted run exactly.
    ``stop_after`` halts after that many total steps.
    """
    t0 = time.perf_counter()
    if P is None:
        if not isinstance(train_manifest, DatasetManifest):
            raise ValueError("a projection matrix is required when training from tensors")
        P = projection_for(train_manifest)
    train_data = _as_data(train_manifest)
    val_data = _as_data(val_manifest)
    img_size = train_data.img_size
    torch.manual_seed(config.seed)
    model = KIIM(config, img_size).to(dtype)
    if init is not None:
        if init.vocab != model.vocab:
            raise ValueError("vocabulary mismatch between checkpoint and model")
        diff = {k for k, v in config.architecture().items() if init.config.architecture()[k] != v}
        if diff:
            raise ValueError(f"init checkpoint has a different architecture: {sorted(diff)}")
        model.load_state_dict(init.best_state if init.best_state is not None else init.model_state)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    state = TrainState(seed=config.seed)
    best_state = None
    if resume is not None:
        if resume.config.to_dict() != config.to_dict():
            raise ValueError("resume checkpoint was produced with a different config")
        model.load_state_dict(resume.model_state)
        opt.load_state_dict(resume.optimizer_state)
        state = copy.deepcopy(resume.train_state)
        best_state = copy.deepcopy(resume.best_state)
    Pt = torch.tensor(P.P, dtype=dtype)

    per_epoch = math.ceil(len(train_data) / config.batch_size)
    total_steps = config.max_steps if config.max_steps is not None else config.epochs * per_epoch
    # once per epoch, but at least every 200 steps on large corpora
    eval_every = config.eval_every or min(per_epoch, 200)
    end = total_steps if stop_after is None else min(stop_after, total_steps)
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "log.jsonl", "a")

    try:
        model.train()
        while state.step < end:
            idx = _batch_indices(len(train_data), config.batch_size, config.seed, state.step)
            rgb, vi, crop, land, label = train_data.batch(idx)
            out = model(rgb, vi, crop, land, Pt)
            total, ce, dice = objective.torch_composite(
                out.log_probs, label, land, config.loss_alpha, config.use_land_masked_dice
            )
            if not torch.isfinite(total):
                raise TrainingDivergedError(state.step, total.item())
            opt.zero_grad(set_to_none=True)
            total.backward()
            opt.step()
            state.step += 1
            state.epoch = (state.step - 1) // per_epoch
            rec = objective.LossBreakdown(
                total.item(), ce.item(), dice.item(), config.loss_alpha, int(label.numel())
            ).to_dict()
            rec.update(step=state.step, epoch=state.epoch)
            state.loss_log.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
            if val_data is not None and (state.step % eval_every == 0 or state.step == total_steps):
                miou = compute_metrics(confusion_over(model, val_data, P)).miou or 0.0
                model.train()
                if state.best_val_miou is None or miou > state.best_val_miou:
                    state.best_val_miou, state.best_step = miou, state.step
                    best_state = copy.deepcopy(model.state_dict())
                logger.info("step %d val mIoU %.4f", state.step, miou)
    finally:
        if log_fh:
            log_fh.close()

    ckpt = Checkpoint(
        config,
        img_size,
        copy.deepcopy(model.state_dict()),
        copy.deepcopy(opt.state_dict()),
        best_state,
        state,
        model.vocab,
        P,
    )
    report = RunReport(config.digest(), config.to_dict(), loss_trajectory=list(state.loss_log))
    if state.step >= total_steps:
        best_model = ckpt.build_model("best").to(dtype)
        report.metrics["train"] = compute_metrics(confusion_over(best_model, train_data, P)).to_dict()
        if val_data is not None:
            report.metrics["val"] = compute_metrics(confusion_over(best_model, val_data, P)).to_dict()
    report.selected = {"lr": config.lr, "batch_size": config.batch_size, "loss_alpha": config.loss_alpha}
    report.extra.update(best_step=state.best_step, steps=state.step)
    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        ckpt.save(out_dir / "checkpoint.pt")
        report.save(out_dir / "report.json")
    return ckpt, report
