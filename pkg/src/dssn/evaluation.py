"""Confusion-matrix mIoU evaluation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .common import IGNORE, ValidationError
from .synthdata import DatasetIndex, load_item


def new_confusion(num_classes: int) -> np.ndarray:
    return np.zeros((num_classes, num_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, pred, gt) -> np.ndarray:
    """Return ``cm`` plus counts[gt, pred] over non-IGNORE pixels (rows = ground truth)."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValidationError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    c = cm.shape[0]
    valid = gt != IGNORE
    g, p = gt[valid], pred[valid]
    if g.size and (g.min() < 0 or g.max() >= c):
        raise ValidationError(f"ground-truth class out of range [0, {c})")
    if p.size and (p.min() < 0 or p.max() >= c):
        raise ValidationError(f"predicted class out of range [0, {c})")
    return cm + np.bincount(g * c + p, minlength=c * c).reshape(c, c)


def miou(cm: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class is in neither gt nor pred) and their mean."""
    if cm.sum() == 0:
        raise ValidationError("no evaluated pixels")
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    iou = np.full(cm.shape[0], np.nan)
    present = union > 0
    iou[present] = tp[present] / union[present]
    return iou, float(iou[present].mean())


@dataclass
class Metrics:
    miou: float
    per_class_iou: list  # None for excluded classes
    pixel_acc: float
    num_pixels: int
    confusion: np.ndarray

    def to_json(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "pixel_acc": self.pixel_acc,
            "num_pixels": self.num_pixels,
        }


def metrics_from_confusion(cm: np.ndarray) -> Metrics:
    iou, mean = miou(cm)
    return Metrics(
        miou=mean,
        per_class_iou=[None if np.isnan(v) else float(v) for v in iou],
        pixel_acc=float(np.trace(cm) / cm.sum()),
        num_pixels=int(cm.sum()),
        confusion=cm,
    )


@torch.no_grad()
def predict(net: torch.nn.Module, images: torch.Tensor) -> torch.Tensor:
    """Argmax prediction at native resolution (padding up to the encoder stride)."""
    stride = net.arch.stride
    h, w = images.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    x = F.pad(images, (0, pw, 0, ph), mode="replicate") if ph or pw else images
    logits = net(x)[..., :h, :w]
    return logits.argmax(dim=1)


def evaluate(net: torch.nn.Module, index: DatasetIndex, ids: Optional[Sequence[str]] = None,
             batch_size: int = 16) -> Metrics:
    ids = list(index.ids if ids is None else ids)
    if not ids:
        raise ValidationError("nothing to evaluate")
    was_training = net.training
    net.eval()
    dtype = next(net.parameters()).dtype
    cm = new_confusion(index.num_classes)
    try:
        for start in range(0, len(ids), batch_size):
            chunk = ids[start:start + batch_size]
            imgs, gts = [], []
            for i in chunk:
                img, m = load_item(index, i)
                if m is None:
                    raise ValidationError(f"validation item {i} has no mask")
                imgs.append(img[0])
                gts.append(m[0])
            if len({im.shape for im in imgs}) == 1:
                pred = predict(net, torch.from_numpy(np.stack(imgs)).to(dtype))
                cm = accumulate(cm, pred.numpy(), np.stack(gts))
                continue
            for im, gt in zip(imgs, gts):  # mixed sizes: one at a time
                pred = predict(net, torch.from_numpy(im[None]).to(dtype))
                cm = accumulate(cm, pred[0].numpy(), gt)
    finally:
        net.train(was_training)
    return metrics_from_confusion(cm)
