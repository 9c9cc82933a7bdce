"""Checkpoints: weights, optimizer state, training progress and provenance in one file."""

from __future__ import annotations

import copy
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import torch

from ..core import ClassVocab, ExperimentConfig
from ..knowledge import ProjectionMatrix
from ..network import KIIM
from ..spectral import VI_CHANNELS


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val_miou: Optional[float] = None
    best_step: Optional[int] = None
    seed: int = 0
    loss_log: List[dict] = field(default_factory=list)


@dataclass
class Checkpoint:
    """``model_state`` is the latest weights; ``best_state`` the best-validation weights (if tracked)."""

    config: ExperimentConfig
    img_size: int
    model_state: Dict[str, torch.Tensor]
    optimizer_state: Optional[dict] = None
    best_state: Optional[Dict[str, torch.Tensor]] = None
    train_state: TrainState = field(default_factory=TrainState)
    vocab: ClassVocab = field(default_factory=ClassVocab)
    projection: Optional[ProjectionMatrix] = None
    vi_channels: tuple = VI_CHANNELS
    meta: dict = field(default_factory=dict)

    def build_model(self, which: str = "best") -> KIIM:
        torch.manual_seed(0)
        model = KIIM(self.config, self.img_size, self.vocab)
        state = self.best_state if which == "best" and self.best_state is not None else self.model_state
        model.load_state_dict(state)
        model.eval()
        return model

    def copy(self) -> "Checkpoint":
        return copy.deepcopy(self)

    def to_payload(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "img_size": self.img_size,
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "best_state": self.best_state,
            "train_state": asdict(self.train_state),
            "vocab": self.vocab.to_dict(),
            "projection": None if self.projection is None else self.projection.to_dict(),
            "projection_digest": None if self.projection is None else self.projection.digest(),
            "vi_channels": list(self.vi_channels),
            "meta": self.meta,
        }

    def save(self, path: os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.to_payload(), path)
        return path

    @classmethod
    def from_payload(cls, d: dict) -> "Checkpoint":
        return cls(
            ExperimentConfig.from_dict(d["config"]),
            d["img_size"],
            d["model_state"],
            d["optimizer_state"],
            d["best_state"],
            TrainState(**d["train_state"]),
            ClassVocab.from_dict(d["vocab"]),
            None if d["projection"] is None else ProjectionMatrix.from_dict(d["projection"]),
            tuple(d["vi_channels"]),
            d.get("meta", {}),
        )

    @classmethod
    def load(cls, path: os.PathLike) -> "Checkpoint":
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
        if tuple(payload["vi_channels"]) != VI_CHANNELS:
            raise ValueError(f"checkpoint VI channel order {payload['vi_channels']} differs from {VI_CHANNELS}")
        return cls.from_payload(payload)
