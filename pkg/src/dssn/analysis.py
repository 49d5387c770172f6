"""Pseudo-label quality: CPLG against fixed thresholds, per image and class."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .common import IGNORE, ValidationError
from .model import predict_probs
from .pseudolabel import CplgParams, cplg_select, effective_pixel_mask, fixed_threshold_mask, make_pseudo_label
from .synthdata import DatasetIndex, load_item

FIXED_DEFAULT = (0.92, 0.96)


def method_names(fixed: Sequence[float]) -> list[str]:
    return ["cplg"] + [f"fixed_{t:g}" for t in fixed]


@dataclass
class PseudoRow:
    image: str
    cls: int
    y_max: float
    tau: float
    selected: dict  # method -> selected pixels whose pseudo class is cls
    correct: dict = field(default_factory=dict)  # method -> of those, pixels whose ground truth is cls
    gt_pixels: Optional[int] = None


def analyze_probs(image: str, y: torch.Tensor, gt: Optional[np.ndarray], params: CplgParams,
                  fixed: Sequence[float] = FIXED_DEFAULT) -> list[PseudoRow]:
    """Rows for one image from its 1 x C x H x W probability map."""
    if y.dim() != 4 or y.shape[0] != 1:
        raise ValidationError(f"expected a 1 x C x H x W map, got {tuple(y.shape)}")
    c = y.shape[1]
    pl = make_pseudo_label(y)
    cplg_m, th = cplg_select(y, params)
    masks = {"cplg": effective_pixel_mask(cplg_m, pl)}
    for t in fixed:
        masks[f"fixed_{t:g}"] = effective_pixel_mask(fixed_threshold_mask(y, t), pl)
    cls_map = pl.classes[0].numpy()
    valid = np.ones_like(cls_map, dtype=bool) if gt is None else gt != IGNORE
    rows = []
    for j in range(c):
        row = PseudoRow(image, j, float(th.y_max[0, j]), float(th.tau[0, j]), {})
        for name, m in masks.items():
            sel = m[0].numpy() & (cls_map == j) & valid
            row.selected[name] = int(sel.sum())
            if gt is not None:
                row.correct[name] = int((sel & (gt == j)).sum())
        if gt is not None:
            row.gt_pixels = int((gt == j).sum())
        rows.append(row)
    return rows


@torch.no_grad()
def analyze_pseudo(net: torch.nn.Module, index: DatasetIndex, ids: Optional[Sequence[str]] = None,
                   params: CplgParams = CplgParams(), fixed: Sequence[float] = FIXED_DEFAULT) -> list[PseudoRow]:
    """Per-image, per-class pseudo-label statistics of ``net`` on un-augmented images."""
    ids = list(index.ids if ids is None else ids)
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    rows = []
    try:
        for i in ids:
            img, mask = load_item(index, i)
            y = predict_probs(net(torch.from_numpy(img).to(dtype)))
            rows += analyze_probs(i, y, None if mask is None else mask[0], params, fixed)
    finally:
        net.train(was_training)
    return rows


@dataclass
class ClassSummary:
    cls: int
    method: str
    selected: int
    correct: Optional[int]
    gt_pixels: Optional[int]

    @property
    def precision(self) -> Optional[float]:
        return None if self.correct is None or self.selected == 0 else self.correct / self.selected

    @property
    def recall(self) -> Optional[float]:
        return None if self.correct is None or not self.gt_pixels else self.correct / self.gt_pixels


def summarize(rows: Sequence[PseudoRow]) -> list[ClassSummary]:
    """Pool counts over images: one entry per (class, method)."""
    if not rows:
        return []
    methods = list(rows[0].selected)
    classes = sorted({r.cls for r in rows})
    has_gt = all(r.gt_pixels is not None for r in rows)
    out = []
    for j in classes:
        mine = [r for r in rows if r.cls == j]
        gt = sum(r.gt_pixels for r in mine) if has_gt else None
        for m in methods:
            correct = sum(r.correct[m] for r in mine) if has_gt else None
            out.append(ClassSummary(j, m, sum(r.selected[m] for r in mine), correct, gt))
    return out


def write_rows(rows: Sequence[PseudoRow], path) -> None:
    methods = list(rows[0].selected) if rows else method_names(FIXED_DEFAULT)
    header = ["image", "class", "y_max", "tau"] + [f"selected_{m}" for m in methods]
    header += ["gt_pixels"] + [f"correct_{m}" for m in methods]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            line = [r.image, r.cls, repr(r.y_max), repr(r.tau)] + [r.selected[m] for m in methods]
            line += ["" if r.gt_pixels is None else r.gt_pixels]
            line += ["" if r.gt_pixels is None else r.correct[m] for m in methods]
            w.writerow(line)


def write_summary(summary: Sequence[ClassSummary], path) -> None:
    def fmt(v):
        return "" if v is None else repr(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "method", "selected", "correct", "gt_pixels", "precision", "recall"])
        for s in summary:
            w.writerow([s.cls, s.method, s.selected, fmt(s.correct), fmt(s.gt_pixels), fmt(s.precision),
                        fmt(s.recall)])


def read_summary(path) -> list[dict]:
    with open(Path(path), newline="") as fh:
        return list(csv.DictReader(fh))


def tail_classes(frequency: Sequence[float]) -> list[int]:
    """Classes whose pixel share is below the uniform share 1/C."""
    freq = np.asarray(frequency, dtype=np.float64)
    freq = freq / freq.sum()
    return [j for j, f in enumerate(freq) if f < 1.0 / len(freq)]
