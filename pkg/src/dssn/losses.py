"""Training objectives.

The cross-entropy style terms are normalised by the number of contributing
pixels rather than summed, so the trade-off weights do not depend on crop size.
The contrastive terms use only positive pairs: with a Gaussian similarity
d = exp(-||h1 - h2||^2), -log d reduces to the squared distance itself.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import torch

from .common import IGNORE, NumericError, ValidationError
from .pseudolabel import PseudoLabel

EPS = 1e-12


class EmptyLossWarning(UserWarning):
    """A loss had no contributing pixels and returned 0."""


@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 0.01
    gamma2: float = 0.25

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValidationError(f"loss weights must be >= 0, got gamma1={self.gamma1}, gamma2={self.gamma2}")


TERMS = ("sup", "cl_ls", "cl_hs", "w2s_l", "w2s_h")


@dataclass
class LossBundle:
    sup: torch.Tensor
    cl_ls: torch.Tensor
    cl_hs: torch.Tensor
    w2s_l: torch.Tensor
    w2s_h: torch.Tensor
    total: torch.Tensor
    selected_px_l: int = 0
    selected_px_h: int = 0

    def as_floats(self) -> dict[str, float]:
        out = {name: float(getattr(self, name)) for name in TERMS + ("total",)}
        out["selected_px_l"] = float(self.selected_px_l)
        out["selected_px_h"] = float(self.selected_px_h)
        return out


def _true_class_prob(y: torch.Tensor, t: torch.Tensor):
    if y.dim() != 4 or t.shape != (y.shape[0],) + tuple(y.shape[2:]):
        raise ValidationError(f"labels {tuple(t.shape)} not aligned with probabilities {tuple(y.shape)}")
    valid = t != IGNORE
    safe = torch.where(valid, t, torch.zeros_like(t))
    if (safe >= y.shape[1]).any() or (safe < 0).any():
        raise ValidationError("label value out of class range")
    p = y.gather(1, safe[:, None]).squeeze(1)
    return p[valid]


def loss_sup(y: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Cross-entropy averaged over non-IGNORE pixels."""
    p = _true_class_prob(y, t)
    if p.numel() == 0:
        warnings.warn("all pixels are IGNORE; supervised loss is 0", EmptyLossWarning, stacklevel=2)
        return y.sum() * 0.0
    return -torch.log(p.clamp_min(EPS)).mean()


def loss_sup_ohem(y: torch.Tensor, t: torch.Tensor, keep_thresh: float = 0.7, min_kept: int = 200) -> torch.Tensor:
    """Cross-entropy over hard pixels only.

    A pixel is hard when its true-class probability is below ``keep_thresh``;
    if fewer than ``min_kept`` pixels are hard, the ``min_kept`` lowest-probability
    pixels are used instead.
    """
    if min_kept < 1:
        raise ValidationError(f"min_kept must be >= 1, got {min_kept}")
    p = _true_class_prob(y, t)
    if p.numel() == 0:
        warnings.warn("all pixels are IGNORE; OHEM loss is 0", EmptyLossWarning, stacklevel=2)
        return y.sum() * 0.0
    hard = p < keep_thresh if keep_thresh < 1.0 else torch.ones_like(p, dtype=torch.bool)
    if int(hard.sum()) >= min_kept:
        chosen = p[hard]
    else:
        order = torch.sort(p.detach(), stable=True).indices
        chosen = p[order[: min(min_kept, p.numel())]]
    return -torch.log(chosen.clamp_min(EPS)).mean()


def gaussian_similarity(h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
    """exp(-||h1 - h2||^2) over the channel dimension; B x H x W."""
    if h1.shape != h2.shape:
        raise ValidationError(f"similarity inputs differ in shape: {tuple(h1.shape)} vs {tuple(h2.shape)}")
    return torch.exp(-((h1 - h2) ** 2).sum(dim=1))


def loss_contrastive(h1: torch.Tensor, h2: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the squared channel distance between two views' logits.

    Gradients flow into both views.
    """
    if h1.shape != h2.shape:
        raise ValidationError(f"contrastive views differ in shape: {tuple(h1.shape)} vs {tuple(h2.shape)}")
    return ((h1 - h2) ** 2).sum(dim=1).mean()


def masked_ce(y: torch.Tensor, pl: PseudoLabel, px_mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy against ``pl`` over the selected pixels, divided by max(1, #selected)."""
    cls = pl.classes
    expected = (y.shape[0],) + tuple(y.shape[2:])
    if y.dim() != 4 or tuple(cls.shape) != expected or tuple(px_mask.shape) != expected:
        raise ValidationError(
            f"pseudo label {tuple(cls.shape)} / mask {tuple(px_mask.shape)} not aligned with {tuple(y.shape)}"
        )
    m = px_mask.detach().to(y.dtype)
    nll = -torch.log(y.gather(1, cls.detach()[:, None]).squeeze(1).clamp_min(EPS))
    return (nll * m).sum() / m.sum().clamp_min(1.0)


def loss_w2s(y_s1: torch.Tensor, y_s2: torch.Tensor, pl: PseudoLabel, px_mask: torch.Tensor,
             pl2: Optional[PseudoLabel] = None, px_mask2: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Masked cross-entropy of both strong views against the weak-view pseudo label.

    Each view is normalised by its number of selected pixels (at least 1), so an
    empty mask gives exactly 0. ``pl2``/``px_mask2`` supply a separate target for
    the second view when the views were CutMixed with different boxes.
    """
    if y_s1.shape != y_s2.shape:
        raise ValidationError(f"strong views differ in shape: {tuple(y_s1.shape)} vs {tuple(y_s2.shape)}")
    pl2 = pl if pl2 is None else pl2
    px_mask2 = px_mask if px_mask2 is None else px_mask2
    return masked_ce(y_s1, pl, px_mask) + masked_ce(y_s2, pl2, px_mask2)


def total_loss(sup, cl_ls, cl_hs, w2s_l, w2s_h, weights: LossWeights) -> torch.Tensor:
    """sup + gamma1 * (cl_ls + cl_hs) + gamma2 * (w2s_l + w2s_h)."""
    for name, v in zip(TERMS, (sup, cl_ls, cl_hs, w2s_l, w2s_h)):
        if not math.isfinite(float(v.detach() if torch.is_tensor(v) else v)):
            raise NumericError(f"loss term {name} is not finite ({float(v)})")
    return sup + weights.gamma1 * (cl_ls + cl_hs) + weights.gamma2 * (w2s_l + w2s_h)
