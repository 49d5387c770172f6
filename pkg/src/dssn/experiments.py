"""Desk-scale trend experiment: full method vs baseline and ablations, several seeds.

Used by ``scripts/desk_trend.py`` and the acceptance suite.
"""
from __future__ import annotations

import json
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .analysis import analyze_pseudo, summarize
from .augment import AugConfig
from .config import DataConfig, ExperimentConfig
from .losses import LossWeights
from .synthdata import SynthSpec, generate_dataset, open_dataset, split_dataset
from .trainer import TrainConfig, load_checkpoint, train

SEEDS = (0, 1, 2)


def desk_config(root: str = "data/desk") -> ExperimentConfig:
    """C=4 long-tailed 64x64 data, 200 train / 64 val, 20 labeled, 40 epochs."""
    data = DataConfig(
        train_root=f"{root}/train",
        val_root=f"{root}/val",
        synth=SynthSpec(num_classes=4, image_size=(64, 64), num_images=200, seed=0),
        num_val_images=64,
        val_seed=1,
        labeled_fraction=0.1,
        split_seed=0,
    )
    # classes are told apart by hue, so the strong view keeps colour (no grayscale)
    aug = AugConfig(crop_size=64, scale_range=(1.0, 1.0), grayscale_prob=0.0)
    tc = TrainConfig(epochs=40, batch_labeled=1, batch_unlabeled=4, base_lr=0.02, ema_alpha=0.99, aug=aug,
                     checkpoint_every=0, eval_every=10)
    return ExperimentConfig(data=data, train=tc, run_name="desk")


def variants(base: TrainConfig) -> dict[str, TrainConfig]:
    g2 = base.weights.gamma2
    return {
        "full": base,
        "supervised": replace(base, weights=LossWeights(0.0, 0.0)),
        "no_contrastive": replace(base, weights=LossWeights(0.0, g2)),
        "no_cplg": replace(base, selection="none"),
        "low_level_only": replace(base, cl_high=False),
        "high_level_only": replace(base, cl_low=False),
        "fixed_0.96": replace(base, selection="fixed", fixed_threshold=0.96),
    }


def prepare_data(cfg: ExperimentConfig):
    d = cfg.data
    train_root, val_root = Path(d.train_root), Path(d.val_root)
    if not (train_root / "meta.json").exists():
        generate_dataset(d.synth, train_root)
    if not (val_root / "meta.json").exists():
        generate_dataset(replace(d.synth, num_images=d.num_val_images, seed=d.val_seed), val_root)
    index = split_dataset(open_dataset(train_root), d.labeled_fraction, d.split_seed)
    return index, open_dataset(val_root)


def run_trend(workdir, names: Optional[Sequence[str]] = None, seeds: Sequence[int] = SEEDS,
              cfg: Optional[ExperimentConfig] = None, echo: Callable[[str], None] = print) -> dict:
    """Train every (variant, seed); results (final teacher/student mIoU) go to ``workdir/results.json``.

    Finished runs found in ``results.json`` are not retrained.
    """
    workdir = Path(workdir)
    cfg = cfg or desk_config(str(workdir / "data"))
    index, val = prepare_data(cfg)
    table = variants(cfg.train)
    names = list(table) if names is None else list(names)
    results_path = workdir / "results.json"
    results = json.loads(results_path.read_text()) if results_path.exists() else {}
    for name in names:
        for seed in seeds:
            key = f"{name}/{seed}"
            if key in results:
                continue
            t0 = time.time()
            tc = replace(table[name], seed=seed)
            report = train(tc, index, index, val, run_dir=workdir / "runs" / name / str(seed))
            results[key] = {
                "teacher": report.final_miou_teacher,
                "student": report.final_miou_student,
                "seconds": time.time() - t0,
            }
            results_path.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
            echo(f"{key:24s} teacher {report.final_miou_teacher:.4f} student {report.final_miou_student:.4f} "
                 f"({time.time() - t0:.0f}s)")
    return results


def mean_miou(results: dict, name: str, seeds: Sequence[int] = SEEDS, which: str = "teacher") -> float:
    return float(np.mean([results[f"{name}/{s}"][which] for s in seeds]))


def pseudo_label_quality(workdir, cfg: Optional[ExperimentConfig] = None, name: str = "full",
                         seeds: Sequence[int] = SEEDS) -> dict:
    """Pooled per-class precision/recall of each selection rule, from the final teachers of ``name``."""
    workdir = Path(workdir)
    cfg = cfg or desk_config(str(workdir / "data"))
    _, val = prepare_data(cfg)
    rows = []
    for seed in seeds:
        ck = workdir / "runs" / name / str(seed) / f"ckpt_{cfg.train.epochs}"
        state = load_checkpoint(ck, num_classes=val.num_classes)
        rows += analyze_pseudo(state.teacher.params, val, params=cfg.train.cplg)
    out = {}
    for s in summarize(rows):
        out.setdefault(s.cls, {})[s.method] = {"precision": s.precision, "recall": s.recall,
                                              "selected": s.selected, "correct": s.correct}
    return out
