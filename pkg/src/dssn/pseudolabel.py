"""Argmax pseudo labels and class-aware pixel selection.

Class-aware selection keeps, for every class j, the pixels whose probability
for j exceeds tau_j, where tau_j is r% of that class's maximum probability
(or the maximum itself when it does not exceed ``tau_low``, which then selects
nothing because the comparison is strict).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .common import ValidationError


@dataclass(frozen=True)
class CplgParams:
    r_percent: float = 96.0
    tau_low: float = 0.92
    scope: str = "image"  # "image" or "batch"

    def __post_init__(self):
        if not 0 < self.r_percent <= 100:
            raise ValidationError(f"r_percent must be in (0, 100], got {self.r_percent}")
        if not 0 <= self.tau_low < 1:
            raise ValidationError(f"tau_low must be in [0, 1), got {self.tau_low}")
        if self.scope not in ("image", "batch"):
            raise ValidationError(f"scope must be 'image' or 'batch', got {self.scope!r}")


@dataclass
class PseudoLabel:
    classes: torch.Tensor  # B x H x W int64

    def onehot(self, num_classes: int) -> torch.Tensor:
        """B x C x H x W one-hot view."""
        return torch.nn.functional.one_hot(self.classes, num_classes).permute(0, 3, 1, 2)


@dataclass
class ClassThresholds:
    tau: torch.Tensor  # (B or 1) x C
    y_max: torch.Tensor  # same shape


def _check_probs(y: torch.Tensor) -> None:
    if y.dim() != 4:
        raise ValidationError(f"expected a B x C x H x W probability map, got {tuple(y.shape)}")


def make_pseudo_label(y: torch.Tensor) -> PseudoLabel:
    """Per-pixel argmax; ties go to the lowest class index."""
    _check_probs(y)
    # torch.argmax's tie-break is not documented, so resolve ties explicitly
    top = y.max(dim=1, keepdim=True).values
    c = y.shape[1]
    idx = torch.arange(c, device=y.device).view(1, c, 1, 1)
    cand = torch.where(y == top, idx, torch.full_like(idx, c))
    return PseudoLabel(cand.min(dim=1).values)


def class_max(y: torch.Tensor, scope: str = "image") -> torch.Tensor:
    """Maximum of each class channel over all pixels: B x C (image) or 1 x C (batch)."""
    _check_probs(y)
    per_image = y.flatten(2).max(dim=2).values
    if scope == "image":
        return per_image
    if scope == "batch":
        return per_image.max(dim=0, keepdim=True).values
    raise ValidationError(f"scope must be 'image' or 'batch', got {scope!r}")


def cplg_thresholds(y_max: torch.Tensor, params: CplgParams) -> ClassThresholds:
    tau = torch.where(y_max > params.tau_low, y_max * (params.r_percent / 100.0), y_max)
    return ClassThresholds(tau=tau, y_max=y_max)


def cplg_mask(y: torch.Tensor, thresholds: ClassThresholds) -> torch.Tensor:
    """m_ij = 1 iff y_ij > tau_j (strict), as a B x C x H x W bool tensor."""
    _check_probs(y)
    tau = thresholds.tau
    if tau.shape[-1] != y.shape[1] or tau.shape[0] not in (1, y.shape[0]):
        raise ValidationError(f"thresholds {tuple(tau.shape)} do not match probabilities {tuple(y.shape)}")
    return y > tau[:, :, None, None]


def cplg_select(y: torch.Tensor, params: CplgParams) -> tuple[torch.Tensor, ClassThresholds]:
    th = cplg_thresholds(class_max(y, params.scope), params)
    return cplg_mask(y, th), th


def fixed_threshold_mask(y: torch.Tensor, tau_fixed: float) -> torch.Tensor:
    """Same threshold for every class: m_ij = 1 iff y_ij > tau_fixed."""
    _check_probs(y)
    if not 0 <= tau_fixed < 1:
        raise ValidationError(f"tau_fixed must be in [0, 1), got {tau_fixed}")
    return y > tau_fixed


def effective_pixel_mask(m: torch.Tensor, pl: PseudoLabel) -> torch.Tensor:
    """Selection at each pixel's pseudo class: out[b, i] = m[b, classes[b, i], i]."""
    if m.dim() != 4 or m.shape[0] != pl.classes.shape[0] or m.shape[2:] != pl.classes.shape[1:]:
        raise ValidationError(f"mask {tuple(m.shape)} not aligned with pseudo label {tuple(pl.classes.shape)}")
    return m.gather(1, pl.classes[:, None]).squeeze(1)
