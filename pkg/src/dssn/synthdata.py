"""Long-tailed synthetic segmentation data plus the on-disk dataset format.

Layout of a dataset root::

    images/<id>.png      8-bit RGB
    masks/<id>.png       8-bit class index, 255 = ignore
    splits/<name>.txt    labeled ids, one per line
    meta.json            num_classes, class_names, generator_spec

Real datasets converted to the same layout load through :func:`open_dataset`.
"""
from __future__ import annotations

import colorsys
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .common import IGNORE, ValidationError, to_dict


def geometric_frequency(num_classes: int, ratio: float = 0.5) -> tuple[float, ...]:
    w = ratio ** np.arange(num_classes)
    return tuple(float(x) for x in w / w.sum())


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    num_images: int = 200
    # None -> geometric with ratio 0.5 (class 0 most frequent).
    class_frequency: Optional[tuple[float, ...]] = None
    shapes_per_image: tuple[int, int] = (2, 5)
    noise_std: float = 0.03
    seed: int = 0
    # Spread of the per-image illumination gain, and per-shape colour noise.
    illumination: float = 0.35
    color_jitter: float = 0.06

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.image_size) != 2 or min(self.image_size) < 16:
            raise ValidationError(f"image_size must be (H, W) with H, W >= 16, got {self.image_size}")
        if self.num_images < 1:
            raise ValidationError(f"num_images must be >= 1, got {self.num_images}")
        lo, hi = self.shapes_per_image
        if lo < 0 or hi < lo:
            raise ValidationError(f"shapes_per_image must satisfy 0 <= min <= max, got {self.shapes_per_image}")
        if self.noise_std < 0:
            raise ValidationError(f"noise_std must be >= 0, got {self.noise_std}")
        if not 0 <= self.illumination < 1:
            raise ValidationError(f"illumination must be in [0, 1), got {self.illumination}")
        if self.color_jitter < 0:
            raise ValidationError(f"color_jitter must be >= 0, got {self.color_jitter}")
        if self.class_frequency is not None:
            freq = self.class_frequency
            if len(freq) != self.num_classes:
                raise ValidationError(
                    f"class_frequency must have num_classes={self.num_classes} entries, got {len(freq)}"
                )
            if any(not (f > 0 and math.isfinite(f)) for f in freq):
                raise ValidationError(f"class_frequency entries must be strictly positive, got {freq}")

    @property
    def frequency(self) -> np.ndarray:
        freq = self.class_frequency or geometric_frequency(self.num_classes)
        freq = np.asarray(freq, dtype=np.float64)
        return freq / freq.sum()


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    ids: tuple[str, ...]
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    num_classes: int
    class_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if set(self.labeled_ids) & set(self.unlabeled_ids):
            raise ValidationError("labeled_ids and unlabeled_ids overlap")


@dataclass
class SynthItem:
    image: np.ndarray  # H x W x 3 uint8
    mask: np.ndarray  # H x W uint8
    shape_classes: list[int]


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed RGB colour per class, evenly spaced hues."""
    cols = []
    for j in range(num_classes):
        # class 0 shapes are dull distractors; foreground classes are saturated
        sat, val = (0.25, 0.55) if j == 0 else (0.85, 0.85)
        hue = (j - 1) / max(num_classes - 1, 1) if j else 0.0
        cols.append(colorsys.hsv_to_rgb(hue, sat, val))
    return np.asarray(cols, dtype=np.float64)


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cells: int = 4) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1, 3))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return (1 - fy) * ((1 - fx) * g00 + fx * g01) + fy * ((1 - fx) * g10 + fx * g11)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    size = rng.uniform(0.12, 0.3) * min(h, w)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    kind = rng.integers(3)
    if kind == 0:  # rectangle
        ry, rx = size * rng.uniform(0.6, 1.0), size * rng.uniform(0.6, 1.0)
        return (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    if kind == 1:  # circle
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= size**2
    # triangle, apex up
    top = cy - size
    bottom = cy + size
    half = (yy - top) / (2 * size) * size
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def render_item(spec: SynthSpec, index: int) -> SynthItem:
    """Render item ``index`` of ``spec``. Pure in (spec, index)."""
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    palette = class_palette(spec.num_classes)
    freq = spec.frequency

    base = rng.uniform(0.35, 0.6)
    texture = _smooth_noise(rng, h, w)
    img = base + 0.25 * (texture - 0.5)
    img = img * 0.6 + img.mean(axis=2, keepdims=True) * 0.4
    mask = np.zeros((h, w), dtype=np.uint8)

    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1))
    classes = []
    for _ in range(n_shapes):
        c = int(rng.choice(spec.num_classes, p=freq))
        region = _shape_mask(rng, h, w)
        color = palette[c] + rng.normal(0, spec.color_jitter, 3)
        img[region] = color
        mask[region] = c
        classes.append(c)

    gain = rng.uniform(1 - spec.illumination, 1 + spec.illumination)
    cast = rng.uniform(1 - spec.illumination / 2, 1 + spec.illumination / 2, 3)
    img = img * gain * cast
    if spec.noise_std > 0:
        img = img + rng.normal(0, spec.noise_std, img.shape)
    image = np.clip(np.round(img * 255), 0, 255).astype(np.uint8)
    return SynthItem(image=image, mask=mask, shape_classes=classes)


def item_id(index: int) -> str:
    return f"{index:05d}"


def _write_item(root: Path, spec: SynthSpec, i: int) -> None:
    item = render_item(spec, i)
    Image.fromarray(item.image, mode="RGB").save(root / "images" / f"{item_id(i)}.png")
    Image.fromarray(item.mask, mode="L").save(root / "masks" / f"{item_id(i)}.png")


def generate_dataset(spec: SynthSpec, root, workers: int = 1) -> DatasetIndex:
    """Write ``spec.num_images`` image/mask pairs plus meta.json under ``root``."""
    root = Path(root)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        (root / "splits").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {root}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(lambda i: _write_item(root, spec, i), range(spec.num_images)))
    else:
        for i in range(spec.num_images):
            _write_item(root, spec, i)

    names = ["background"] + [f"class{j}" for j in range(1, spec.num_classes)]
    meta = {"num_classes": spec.num_classes, "class_names": names, "generator_spec": to_dict(spec)}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return open_dataset(root)


def open_dataset(root, split: Optional[str] = None) -> DatasetIndex:
    """Index a dataset directory.

    Without ``split`` every id that has a mask counts as labeled. With a split
    name, ``splits/<split>.txt`` lists the labeled ids and the rest are unlabeled.
    """
    root = Path(root)
    meta_path = root / "meta.json"
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise OSError(f"missing {meta_path}") from None
    except json.JSONDecodeError as exc:
        raise OSError(f"corrupt {meta_path}: {exc}") from None
    num_classes = int(meta["num_classes"])
    ids = tuple(sorted(p.stem for p in (root / "images").glob("*.png")))
    if split is None:
        labeled = tuple(i for i in ids if (root / "masks" / f"{i}.png").exists())
    else:
        split_path = root / "splits" / f"{split}.txt"
        labeled = tuple(line for line in split_path.read_text().splitlines() if line)
        missing = sorted(set(labeled) - set(ids))
        if missing:
            raise ValidationError(f"{split_path}: ids without images: {missing[:5]}")
    lab_set = set(labeled)
    return DatasetIndex(
        root=root,
        ids=ids,
        labeled_ids=labeled,
        unlabeled_ids=tuple(i for i in ids if i not in lab_set),
        num_classes=num_classes,
        class_names=tuple(meta.get("class_names", ())),
    )


def split_dataset(index: DatasetIndex, labeled_fraction: float, seed: int) -> DatasetIndex:
    """Uniformly sample ``ceil(fraction * |ids|)`` labeled ids; the rest are unlabeled."""
    n = len(index.ids)
    if n == 0:
        raise ValidationError("cannot split an empty dataset index")
    if not 0 < labeled_fraction <= 1:
        raise ValidationError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    # rounding guards against 0.1 * 200 = 20.000000000000004 style products
    n_lab = math.ceil(round(labeled_fraction * n, 9))
    rng = np.random.default_rng(seed)
    chosen = set(rng.choice(n, size=n_lab, replace=False).tolist())
    labeled = tuple(i for k, i in enumerate(index.ids) if k in chosen)
    unlabeled = tuple(i for k, i in enumerate(index.ids) if k not in chosen)
    return DatasetIndex(index.root, index.ids, labeled, unlabeled, index.num_classes, index.class_names)


def write_split(index: DatasetIndex, name: str) -> Path:
    path = Path(index.root) / "splits" / f"{name}.txt"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i}\n" for i in index.labeled_ids))
    return path


def _read_png(path: Path, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode != mode:
                im = im.convert(mode)
            return np.asarray(im)
    except FileNotFoundError:
        raise OSError(f"missing file {path}") from None
    except (OSError, SyntaxError, ValueError) as exc:
        raise OSError(f"cannot read {path}: {exc}") from None


def load_item(index: DatasetIndex, item: str) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Return a 1x3xHxW float32 image in [0, 1] and a 1xHxW int64 mask (None if unlabeled)."""
    if item not in index.ids:
        raise ValidationError(f"unknown item id {item!r}")
    root = Path(index.root)
    img = _read_png(root / "images" / f"{item}.png", "RGB")
    image = (img.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]
    if item in index.unlabeled_ids:
        return image, None
    mask_path = root / "masks" / f"{item}.png"
    raw = _read_png(mask_path, "L").astype(np.int64)
    bad = (raw >= index.num_classes) & (raw != IGNORE)
    if bad.any():
        raise ValidationError(
            f"{mask_path}: mask value {int(raw[bad][0])} out of range for {index.num_classes} classes"
        )
    return image, raw[None]


def load_arrays(index: DatasetIndex, ids: Sequence[str], with_masks: bool = True):
    """Stack items into (N x 3 x H x W float32, N x H x W int64 or None)."""
    images, masks = [], []
    for i in ids:
        img, m = load_item(index, i)
        images.append(img[0])
        if with_masks:
            if m is None:
                raise ValidationError(f"item {i} has no mask")
            masks.append(m[0])
    imgs = np.stack(images) if images else np.zeros((0, 3, 1, 1), np.float32)
    return imgs, (np.stack(masks) if with_masks and masks else None)


def default_workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))
