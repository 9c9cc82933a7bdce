"""Hyperparameter grid search with k-fold validation, and the module ablation runner."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..core import DatasetManifest, ExperimentConfig, kfold_splits
from .train import RunReport, projection_for, train

logger = logging.getLogger(__name__)

DEFAULT_GRIDS: Dict[str, List] = {
    "lr": [1e-4, 2e-4, 5e-4],
    "batch_size": [16, 32, 64],
    "loss_alpha": [0.0, 0.4, 0.5, 0.6, 1.0],
}


@dataclass
class GridCell:
    params: Dict[str, float]
    fold_mious: List[float] = field(default_factory=list)
    reports: List[RunReport] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def mean_miou(self) -> Optional[float]:
        return float(np.mean(self.fold_mious)) if self.fold_mious and self.error is None else None

    def sort_key(self):
        # best first: high mean IoU, then lower lr, then smaller batch, then the remaining params
        rest = tuple(v for k, v in sorted(self.params.items()) if k not in ("lr", "batch_size"))
        return (-(self.mean_miou if self.mean_miou is not None else -np.inf),
                self.params.get("lr", 0.0), self.params.get("batch_size", 0), rest)


def grid_cells(grids: Dict[str, Sequence]) -> List[Dict]:
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ValueError("grids must be non-empty")
    keys = sorted(grids)
    values = [sorted(set(grids[k])) for k in keys]
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def grid_search(
    base_config: ExperimentConfig,
    manifest: DatasetManifest,
    grids: Optional[Dict[str, Sequence]] = None,
    folds: int = 5,
    stratified: bool = False,
) -> Tuple[ExperimentConfig, List[GridCell]]:
    """Evaluate every grid cell by k-fold validation mean macro-IoU and pick the best.

    Each cell uses the base seed, so results do not depend on enumeration
    order. Cells whose training fails are recorded with their error.
    """
    grids = DEFAULT_GRIDS if grids is None else grids
    splits = kfold_splits(manifest, folds, base_config.seed, stratified)
    projections = [projection_for(tr) for tr, _ in splits]
    cells = []
    for params in grid_cells(grids):
        cell = GridCell(params)
        cfg = base_config.replace(**params)
        try:
            for (tr, va), P in zip(splits, projections):
                _, rep = train(cfg, tr, va, P)
                cell.reports.append(rep)
                cell.fold_mious.append(rep.miou("val") or 0.0)
        except Exception as exc:  # a failing cell must not abort the search
            logger.warning("grid cell %s failed: %s", params, exc)
            cell.error = f"{type(exc).__name__}: {exc}"
        cells.append(cell)
    ranked = sorted((c for c in cells if c.mean_miou is not None), key=GridCell.sort_key)
    if not ranked:
        raise RuntimeError("every grid cell failed")
    return base_config.replace(**ranked[0].params), cells


# name -> (attention module, projection module, land-masked dice, fusion mode)
ABLATION_ROWS: Dict[str, Tuple[bool, bool, bool, str]] = {
    "AM+PM+LDL cross": (True, True, True, "cross"),
    "AM+PM+LDL self": (True, True, True, "self"),
    "PM+LDL cross": (False, True, True, "cross"),
    "LDL cross": (False, False, True, "cross"),
    "PM cross": (False, True, False, "cross"),
    "cross only": (False, False, False, "cross"),
    "all off": (False, False, False, "none"),
}
EXTRA_ROWS: Dict[str, Tuple[bool, bool, bool, str]] = {
    "AM+LDL cross (no PM)": (True, False, True, "cross"),
}


def ablation_config(base: ExperimentConfig, row: str) -> ExperimentConfig:
    am, pm, ldl, mode = {**ABLATION_ROWS, **EXTRA_ROWS}[row]
    return base.replace(use_attention_module=am, use_projection_module=pm, use_land_masked_dice=ldl, fusion_mode=mode)


@dataclass
class AblationRow:
    name: str
    flags: Tuple[bool, bool, bool, str]
    dice: float
    iou: float
    per_seed_iou: List[float]
    reports: List[RunReport] = field(default_factory=list)


def ablate(
    base_config: ExperimentConfig,
    train_manifest: DatasetManifest,
    val_manifest: DatasetManifest,
    seeds: Sequence[int] = (0,),
    rows: Optional[Sequence[str]] = None,
) -> List[AblationRow]:
    """Train each ablation row on the same data and seeds; medians of validation macro Dice / IoU."""
    from .data import PatchTensors

    rows = list(ABLATION_ROWS) if rows is None else list(rows)
    P = projection_for(train_manifest)
    tr, va = PatchTensors.from_manifest(train_manifest), PatchTensors.from_manifest(val_manifest)
    out = []
    for name in rows:
        cfg = ablation_config(base_config, name)
        dices, ious, reps = [], [], []
        for seed in seeds:
            _, rep = train(cfg.replace(seed=seed), tr, va, P)
            rep.tag = name
            macro = rep.metrics["val"]["macro"]
            dices.append(macro["dice"] or 0.0)
            ious.append(macro["iou"] or 0.0)
            reps.append(rep)
        out.append(AblationRow(name, {**ABLATION_ROWS, **EXTRA_ROWS}[name], float(np.median(dices)),
                               float(np.median(ious)), ious, reps))
    return out


def ablation_table(rows: Sequence[AblationRow]) -> str:
    mark = {True: "yes", False: "no"}
    lines = [f"{'row':<22} {'AM':>3} {'PM':>3} {'LDL':>3} {'MSM':>5} {'Dice':>6} {'IoU':>6}"]
    for r in rows:
        am, pm, ldl, mode = r.flags
        lines.append(
            f"{r.name:<22} {mark[am]:>3} {mark[pm]:>3} {mark[ldl]:>3} {mode:>5} {r.dice:6.3f} {r.iou:6.3f}"
        )
    return "\n".join(lines)
