"""Weak (geometric) and strong (photometric, CutMix, feature dropout) views.

All functions take an explicit ``seed`` (int or tuple of ints) and are pure:
identical inputs and seed give identical outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .common import IGNORE, ValidationError, check_prob


@dataclass(frozen=True)
class AugConfig:
    crop_size: int = 64
    scale_range: tuple[float, float] = (0.5, 2.0)
    hflip_prob: float = 0.5
    # brightness, contrast, saturation deltas
    jitter_strength: tuple[float, float, float] = (0.5, 0.5, 0.5)
    jitter_prob: float = 0.8
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    cutmix_prob: float = 0.5
    feature_dropout_rate: float = 0.5

    def __post_init__(self):
        if self.crop_size <= 0:
            raise ValidationError(f"crop_size must be > 0, got {self.crop_size}")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValidationError(f"scale_range must satisfy 0 < min <= max, got {self.scale_range}")
        for name in ("hflip_prob", "jitter_prob", "grayscale_prob", "blur_prob", "cutmix_prob",
                     "feature_dropout_rate"):
            check_prob(name, getattr(self, name))
        if len(self.jitter_strength) != 3 or any(s < 0 for s in self.jitter_strength):
            raise ValidationError(f"jitter_strength must be 3 non-negative deltas, got {self.jitter_strength}")
        s_lo, s_hi = self.blur_sigma_range
        if not 0 < s_lo <= s_hi:
            raise ValidationError(f"blur_sigma_range must satisfy 0 < min <= max, got {self.blur_sigma_range}")


@dataclass(frozen=True)
class CutMixBox:
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def check(self, h: int, w: int) -> None:
        if (self.top < 0 or self.left < 0 or self.height < 0 or self.width < 0
                or self.top + self.height > h or self.left + self.width > w):
            raise ValidationError(f"{self} does not fit inside a {h}x{w} image")


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def torch_generator(seed) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.default_rng(seed).integers(2**62)))
    return g


def _hflip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=(-1,))


def aug_weak(image: torch.Tensor, mask: Optional[torch.Tensor], seed, cfg: AugConfig):
    """Random flip, rescale and crop of a CxHxW image and its HxW mask.

    Regions outside the rescaled image are padded with 0 (image) and IGNORE (mask).
    """
    if cfg.crop_size <= 0:
        raise ValidationError(f"crop_size must be > 0, got {cfg.crop_size}")
    if mask is not None and mask.shape[-2:] != image.shape[-2:]:
        raise ValidationError(f"mask {tuple(mask.shape)} not aligned with image {tuple(image.shape)}")
    rng = make_rng(seed)
    flip = rng.random() < cfg.hflip_prob
    scale = rng.uniform(*cfg.scale_range)
    _, h, w = image.shape

    if flip:
        image = _hflip(image)
        mask = _hflip(mask) if mask is not None else None

    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (nh, nw) != (h, w):
        image = F.interpolate(image[None], size=(nh, nw), mode="bilinear", align_corners=False)[0]
        if mask is not None:
            mask = F.interpolate(mask[None, None].float(), size=(nh, nw), mode="nearest")[0, 0].to(mask.dtype)

    cs = cfg.crop_size
    ph, pw = max(cs - nh, 0), max(cs - nw, 0)
    if ph or pw:
        image = F.pad(image, (0, pw, 0, ph), value=0.0)
        if mask is not None:
            mask = F.pad(mask, (0, pw, 0, ph), value=IGNORE)
    top = int(rng.integers(0, image.shape[-2] - cs + 1))
    left = int(rng.integers(0, image.shape[-1] - cs + 1))
    image = image[:, top:top + cs, left:left + cs]
    if mask is not None:
        mask = mask[top:top + cs, left:left + cs]
    return image.contiguous(), (mask.contiguous() if mask is not None else None)


def _gray(image: torch.Tensor) -> torch.Tensor:
    r, g, b = image[0], image[1], image[2]
    return (0.299 * r + 0.587 * g + 0.114 * b)[None]


def gaussian_blur(image: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = math.ceil(3 * sigma)
    xs = torch.arange(-radius, radius + 1, dtype=image.dtype)
    k = torch.exp(-(xs**2) / (2 * sigma**2))
    k = k / k.sum()
    c = image.shape[0]
    x = image[None]
    x = F.pad(x, (radius, radius, 0, 0), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    x = F.pad(x, (0, 0, radius, radius), mode="replicate")
    x = F.conv2d(x, k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    return x[0]


def aug_strong_image(image: torch.Tensor, seed, cfg: AugConfig) -> torch.Tensor:
    """Photometric-only strong view: colour jitter, grayscale, Gaussian blur."""
    if image.dim() != 3 or image.shape[0] != 3:
        raise ValidationError(f"expected a 3xHxW image, got {tuple(image.shape)}")
    rng = make_rng(seed)
    # draw every random number up front so the stream layout never depends on branches
    do_jitter = rng.random() < cfg.jitter_prob
    bs, cs, ss = cfg.jitter_strength
    factors = (rng.uniform(1 - bs, 1 + bs), rng.uniform(1 - cs, 1 + cs), rng.uniform(1 - ss, 1 + ss))
    do_gray = rng.random() < cfg.grayscale_prob
    do_blur = rng.random() < cfg.blur_prob
    sigma = rng.uniform(*cfg.blur_sigma_range)

    out = image
    if do_jitter:
        b, c, s = (max(f, 0.0) for f in factors)
        out = (out * b).clamp(0, 1)
        mean = _gray(out).mean()
        out = ((out - mean) * c + mean).clamp(0, 1)
        gray = _gray(out)
        out = ((out - gray) * s + gray).clamp(0, 1)
    if do_gray:
        out = _gray(out).expand_as(image).clone()
    if do_blur:
        out = gaussian_blur(out, sigma)
    return out.clamp(0, 1)


def sample_cutmix_box(h: int, w: int, seed) -> CutMixBox:
    """Box of size floor(H*sqrt(1-lam)) x floor(W*sqrt(1-lam)), lam ~ U(0, 1).

    The centre is uniform; a box that would cross the border is shifted inside
    so its size is kept.
    """
    rng = make_rng(seed)
    lam = rng.random()
    cut = math.sqrt(1.0 - lam)
    bh, bw = int(math.floor(h * cut)), int(math.floor(w * cut))
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    top = int(np.clip(cy - bh // 2, 0, h - bh))
    left = int(np.clip(cx - bw // 2, 0, w - bw))
    return CutMixBox(top, left, bh, bw)


def apply_cutmix(image_a: torch.Tensor, image_b: torch.Tensor, aux_a: Sequence[torch.Tensor],
                 aux_b: Sequence[torch.Tensor], box: Optional[CutMixBox]):
    """Paste ``box`` of B onto A for the image and every aux tensor alike."""
    if image_a.shape != image_b.shape:
        raise ValidationError(f"cutmix sources differ in shape: {tuple(image_a.shape)} vs {tuple(image_b.shape)}")
    if len(aux_a) != len(aux_b):
        raise ValidationError("cutmix aux lists differ in length")
    h, w = image_a.shape[-2:]
    for a, b in zip(aux_a, aux_b):
        if a.shape != b.shape or a.shape[-2:] != (h, w):
            raise ValidationError(f"cutmix aux {tuple(a.shape)} / {tuple(b.shape)} not aligned with {h}x{w}")
    if box is None or box.area == 0:
        return image_a.clone(), [a.clone() for a in aux_a]
    box.check(h, w)
    ys = slice(box.top, box.top + box.height)
    xs = slice(box.left, box.left + box.width)
    out = image_a.clone()
    out[..., ys, xs] = image_b[..., ys, xs]
    aux_out = []
    for a, b in zip(aux_a, aux_b):
        m = a.clone()
        m[..., ys, xs] = b[..., ys, xs]
        aux_out.append(m)
    return out, aux_out


def cutmix_batch(images: torch.Tensor, aux: Sequence[torch.Tensor], seeds: Sequence, prob: float):
    """CutMix each batch item with its neighbour (batch rolled by one).

    Returns mixed images, mixed aux tensors and the per-item boxes (None = unmixed).
    """
    n, _, h, w = images.shape
    partner = torch.roll(torch.arange(n), 1).tolist()
    out_img = images.clone()
    out_aux = [a.clone() for a in aux]
    boxes: list[Optional[CutMixBox]] = []
    for b in range(n):
        rng = make_rng(seeds[b])
        if n < 2 or rng.random() >= prob:
            boxes.append(None)
            continue
        box = sample_cutmix_box(h, w, rng.integers(2**62))
        p = partner[b]
        img, mixed = apply_cutmix(images[b], images[p], [a[b] for a in aux], [a[p] for a in aux], box)
        out_img[b] = img
        for k, m in enumerate(mixed):
            out_aux[k][b] = m
        boxes.append(box)
    return out_img, out_aux, boxes


def aug_strong_feature(feature: torch.Tensor, rate: float, seed) -> torch.Tensor:
    """Inverted dropout on an encoder feature map (differentiable)."""
    if not 0 <= rate < 1:
        raise ValidationError(f"feature dropout rate must be in [0, 1), got {rate}")
    if rate == 0:
        return feature
    keep = torch.rand(feature.shape, generator=torch_generator(seed), dtype=feature.dtype) >= rate
    return feature * keep.to(feature.dtype) / (1.0 - rate)
