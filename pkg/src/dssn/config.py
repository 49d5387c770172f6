"""Experiment configuration: data generation, split, training and run naming.

Loaded from JSON; unknown keys are rejected at every nesting level.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .common import ValidationError, from_dict
from .synthdata import SynthSpec
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    train_root: str = ""
    val_root: str = ""
    synth: SynthSpec = field(default_factory=SynthSpec)
    num_val_images: int = 64
    val_seed: int = 1
    labeled_fraction: float = 0.1
    split_seed: int = 0

    def __post_init__(self):
        if self.num_val_images < 0:
            raise ValidationError(f"num_val_images must be >= 0, got {self.num_val_images}")
        if not 0 < self.labeled_fraction <= 1:
            raise ValidationError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run_name: str = "dssn"
    runs_dir: str = "runs"

    def __post_init__(self):
        if self.train.arch.num_classes != self.data.synth.num_classes:
            raise ValidationError(
                f"train.arch.num_classes={self.train.arch.num_classes} differs from "
                f"data.synth.num_classes={self.data.synth.num_classes}"
            )


def load_config(path: Optional[str]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config file {path} is not valid JSON: {exc}") from None
    return from_dict(ExperimentConfig, raw)
