"""Toy encoder/decoder segmentation net, softmax head and the EMA teacher."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .common import NumericError, ValidationError, check_prob


@dataclass(frozen=True)
class Arch:
    num_classes: int = 4
    in_channels: int = 3
    encoder_widths: tuple[int, ...] = (16, 32, 64, 64)
    encoder_strides: tuple[int, ...] = (2, 1, 2, 1)
    decoder_width: int = 64
    activation: str = "relu"
    # "group" = per-sample GroupNorm after each conv; keeps items in a batch independent
    norm: str = "group"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.encoder_widths) != len(self.encoder_strides) or not self.encoder_widths:
            raise ValidationError("encoder_widths and encoder_strides must be non-empty and equally long")
        if any(w < 1 for w in self.encoder_widths) or self.decoder_width < 1:
            raise ValidationError("layer widths must be >= 1")
        if any(s not in (1, 2) for s in self.encoder_strides):
            raise ValidationError(f"encoder strides must be 1 or 2, got {self.encoder_strides}")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(f"activation must be one of {sorted(_ACTIVATIONS)}, got {self.activation!r}")
        if self.norm not in ("group", "none"):
            raise ValidationError(f"norm must be 'group' or 'none', got {self.norm!r}")

    @property
    def stride(self) -> int:
        s = 1
        for k in self.encoder_strides:
            s *= k
        return s

    @property
    def feature_dim(self) -> int:
        return self.encoder_widths[-1]


_ACTIVATIONS = {"relu": nn.ReLU, "silu": nn.SiLU}


def _norm(kind: str, width: int) -> list:
    if kind == "none":
        return []
    groups = next(g for g in (8, 4, 2, 1) if width % g == 0)
    return [nn.GroupNorm(groups, width)]


class SegNet(nn.Module):
    """Encoder f(x|theta) and decoder g(z|phi); logits are upsampled to the input size."""

    def __init__(self, arch: Arch):
        super().__init__()
        self.arch = arch
        act = _ACTIVATIONS[arch.activation]
        layers = []
        c_in = arch.in_channels
        for width, stride in zip(arch.encoder_widths, arch.encoder_strides):
            layers += [nn.Conv2d(c_in, width, 3, stride=stride, padding=1), *_norm(arch.norm, width), act()]
            c_in = width
        self.encoder = nn.Sequential(*layers)
        # 3x3 then 1x1: a constant (e.g. zero) feature decodes to spatially constant logits
        self.decoder = nn.Sequential(
            nn.Conv2d(arch.feature_dim, arch.decoder_width, 3, padding=1, padding_mode="replicate"),
            *_norm(arch.norm, arch.decoder_width),
            act(),
            nn.Conv2d(arch.decoder_width, arch.num_classes, 1),
        )

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        a = self.arch
        if image.dim() != 4 or image.shape[1] != a.in_channels:
            raise ValidationError(f"expected B x {a.in_channels} x H x W image, got {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % a.stride or w % a.stride:
            raise ValidationError(f"image size {h}x{w} not divisible by encoder stride {a.stride}")
        return self.encoder(image - 0.5)

    def decode(self, feature: torch.Tensor, out_size: Optional[tuple[int, int]] = None) -> torch.Tensor:
        a = self.arch
        if feature.dim() != 4 or feature.shape[1] != a.feature_dim:
            raise ValidationError(f"expected B x {a.feature_dim} x H' x W' feature, got {tuple(feature.shape)}")
        logits = self.decoder(feature)
        if out_size is None:
            out_size = (feature.shape[-2] * a.stride, feature.shape[-1] * a.stride)
        if tuple(out_size) != tuple(logits.shape[-2:]):
            logits = F.interpolate(logits, size=out_size, mode="bilinear", align_corners=False)
        return logits

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.decode(self.encode(image), image.shape[-2:])


def init_model(arch: Arch, seed: int, dtype: torch.dtype = torch.float32) -> SegNet:
    """Randomly initialised net; identical for identical (arch, seed)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = SegNet(arch)
    return net.to(dtype)


def encode(params: SegNet, image: torch.Tensor) -> torch.Tensor:
    return params.encode(image)


def decode(params: SegNet, feature: torch.Tensor, out_size=None) -> torch.Tensor:
    return params.decode(feature, out_size)


def predict_probs(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel softmax over the class channel."""
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite logits passed to softmax")
    return torch.softmax(logits, dim=1)


@dataclass
class TeacherState:
    params: SegNet
    alpha: float = 0.996

    def __post_init__(self):
        check_prob("alpha", self.alpha)
        for p in self.params.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_student(cls, student: SegNet, alpha: float = 0.996) -> "TeacherState":
        return cls(copy.deepcopy(student), alpha)


@torch.no_grad()
def ema_update(teacher: TeacherState, student: SegNet) -> TeacherState:
    """teacher <- alpha * teacher + (1 - alpha) * student, in place, per tensor."""
    t_params = dict(teacher.params.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ValidationError("teacher and student have different parameter names")
    a = teacher.alpha
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ValidationError(f"teacher/student shape mismatch at {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
        t.mul_(a).add_(s.detach(), alpha=1.0 - a)
    return teacher
