"""Semi-supervised training loop: dual-level contrastive learning plus
weak-to-strong pseudo supervision from an EMA teacher.

Every random draw is derived from (seed, purpose, epoch, step, slot), so a run
is a pure function of its config and data and a resumed run replays the
uninterrupted one exactly.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import augment as A
from .augment import AugConfig
from .common import IGNORE, NumericError, ValidationError, to_dict
from .evaluation import evaluate
from .losses import LossBundle, LossWeights, loss_contrastive, loss_sup, loss_sup_ohem, loss_w2s, total_loss
from .model import Arch, SegNet, TeacherState, ema_update, init_model, predict_probs
from .pseudolabel import CplgParams, cplg_select, effective_pixel_mask, fixed_threshold_mask, make_pseudo_label
from .synthdata import DatasetIndex, load_arrays

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
METRICS_HEADER = (
    "epoch", "lr", "loss_sup", "loss_cl_ls", "loss_cl_hs", "loss_w2s_l", "loss_w2s_h", "loss_total",
    "val_miou_teacher", "val_miou_student", "selected_px_l", "selected_px_h",
)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    base_lr: float = 0.002
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_alpha: float = 0.996
    weights: LossWeights = field(default_factory=LossWeights)
    cplg: CplgParams = field(default_factory=CplgParams)
    aug: AugConfig = field(default_factory=AugConfig)
    arch: Arch = field(default_factory=Arch)
    sup_loss_kind: str = "ce"
    ohem_keep_thresh: float = 0.7
    ohem_min_kept: int = 1000
    # "cplg" (class-aware), "fixed" (one threshold for all classes) or "none" (every pixel)
    selection: str = "cplg"
    fixed_threshold: float = 0.96
    # supervised-only epochs before the unlabeled branch starts (stands in for backbone pretraining)
    warmup_epochs: int = 0
    cl_low: bool = True
    cl_high: bool = True
    # one CutMix box per item shared by both strong image views
    shared_cutmix_box: bool = False
    seed: int = 0
    checkpoint_every: int = 10
    eval_every: int = 1
    dtype: str = "float32"
    deterministic: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ValidationError("batch sizes must be >= 1")
        if not self.base_lr > 0:
            raise ValidationError(f"base_lr must be > 0, got {self.base_lr}")
        if self.sup_loss_kind not in ("ce", "ohem"):
            raise ValidationError(f"sup_loss_kind must be 'ce' or 'ohem', got {self.sup_loss_kind!r}")
        if self.selection not in ("cplg", "fixed", "none"):
            raise ValidationError(f"selection must be 'cplg', 'fixed' or 'none', got {self.selection!r}")
        if not 0 <= self.fixed_threshold < 1:
            raise ValidationError(f"fixed_threshold must be in [0, 1), got {self.fixed_threshold}")
        if not 0 <= self.ema_alpha <= 1:
            raise ValidationError(f"ema_alpha must be in [0, 1], got {self.ema_alpha}")
        if self.warmup_epochs < 0:
            raise ValidationError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.checkpoint_every < 0 or self.eval_every < 0:
            raise ValidationError("checkpoint_every and eval_every must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def supervised_only(self) -> bool:
        return self.weights.gamma1 == 0 and self.weights.gamma2 == 0



def config_hash(config: TrainConfig) -> str:
    blob = json.dumps(to_dict(config), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def lr_at(epoch: float, config: TrainConfig) -> float:
    """Polynomial decay base_lr * (1 - epoch / epochs) ** power."""
    if not 0 <= epoch <= config.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {config.epochs}]")
    return config.base_lr * (1.0 - epoch / config.epochs) ** config.lr_power


@dataclass
class TrainState:
    student: SegNet
    teacher: TeacherState
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    history: list = field(default_factory=list)
    config_hash: str = ""


def make_optimizer(net: SegNet, config: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(net.parameters(), lr=config.base_lr, momentum=config.momentum,
                           weight_decay=config.weight_decay)


def init_state(config: TrainConfig) -> TrainState:
    student = init_model(config.arch, config.seed, dtype=config.torch_dtype)
    teacher = TeacherState.from_student(student, config.ema_alpha)
    return TrainState(student, teacher, make_optimizer(student, config), config_hash=config_hash(config))


# --- one optimisation step -------------------------------------------------


def _select(y: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    if config.selection == "cplg":
        return cplg_select(y, config.cplg)[0]
    if config.selection == "fixed":
        return fixed_threshold_mask(y, config.fixed_threshold)
    return torch.ones_like(y, dtype=torch.bool)


def pseudo_targets(y: torch.Tensor, valid: Optional[torch.Tensor], config: TrainConfig):
    """Pseudo label and per-pixel selection (restricted to valid pixels) from weak-view probabilities."""
    pl = make_pseudo_label(y)
    eff = effective_pixel_mask(_select(y, config), pl)
    if valid is not None:
        eff = eff & valid
    return pl, eff


def supervised_loss(probs: torch.Tensor, target: torch.Tensor, config: TrainConfig) -> torch.Tensor:
    if config.sup_loss_kind == "ohem":
        return loss_sup_ohem(probs, target, config.ohem_keep_thresh, config.ohem_min_kept)
    return loss_sup(probs, target)


def train_step(labeled, unlabeled, state: TrainState, config: TrainConfig, step_seed) -> LossBundle:
    """One step on weak-augmented batches.

    ``labeled`` is (images, masks); ``unlabeled`` is (images, valid) or None for a
    purely supervised step. ``valid`` marks pixels that are not crop padding.
    Updates ``state`` in place (SGD step, then EMA) and returns the loss terms.
    """
    student, teacher = state.student, state.teacher
    student.train()
    x_l, t_l = labeled
    zero = x_l.new_zeros(())

    # (a) supervised
    y_l = predict_probs(student(x_l))
    sup = supervised_loss(y_l, t_l, config)
    cl_ls = cl_hs = w2s_l = w2s_h = zero
    n_sel_l = n_sel_h = 0

    if unlabeled is not None:
        x_u, valid = unlabeled
        n_u, _, h, w = x_u.shape
        cfg = config.aug

        # (d, teacher half) weak-view pseudo labels from the EMA teacher
        with torch.no_grad():
            y_lw = predict_probs(teacher.params(x_u))
        pl_lw, eff_lw = pseudo_targets(y_lw, valid, config)

        # (b) two photometric strong views, CutMix applied with the same boxes to their targets
        views = []
        for v in (1, 2):
            strong = torch.stack([A.aug_strong_image(x_u[b], (*step_seed, 10 + v, b), cfg) for b in range(n_u)])
            box_tag = 13 if config.shared_cutmix_box else 10 + v
            seeds = [(*step_seed, box_tag + 10, b) for b in range(n_u)]
            mixed, (pl_mix, eff_mix), _ = A.cutmix_batch(strong, [pl_lw.classes, eff_lw], seeds, cfg.cutmix_prob)
            views.append((mixed, pl_mix, eff_mix))
        h_ls1 = student(views[0][0])
        h_ls2 = student(views[1][0])
        if config.cl_low:
            cl_ls = loss_contrastive(h_ls1, h_ls2)
        pl1, pl2 = type(pl_lw)(views[0][1]), type(pl_lw)(views[1][1])
        w2s_l = loss_w2s(predict_probs(h_ls1), predict_probs(h_ls2), pl1, views[0][2], pl2, views[1][2])
        n_sel_l = int(views[0][2].sum()) + int(views[1][2].sum())

        # (c) feature-level strong views from the student's weak-view encoding
        z_hw = student.encode(x_u)
        z_hs1 = A.aug_strong_feature(z_hw, cfg.feature_dropout_rate, (*step_seed, 21))
        z_hs2 = A.aug_strong_feature(z_hw, cfg.feature_dropout_rate, (*step_seed, 22))
        h_hs1 = student.decode(z_hs1, (h, w))
        h_hs2 = student.decode(z_hs2, (h, w))
        if config.cl_high:
            cl_hs = loss_contrastive(h_hs1, h_hs2)

        # (d, student half) weak feature prediction from the current decoder, detached
        with torch.no_grad():
            y_hw = predict_probs(student.decode(z_hw.detach(), (h, w)))
        pl_hw, eff_hw = pseudo_targets(y_hw, valid, config)
        w2s_h = loss_w2s(predict_probs(h_hs1), predict_probs(h_hs2), pl_hw, eff_hw)
        n_sel_h = 2 * int(eff_hw.sum())

    # (e) total, SGD step, then EMA
    try:
        total = total_loss(sup, cl_ls, cl_hs, w2s_l, w2s_h, config.weights)
    except NumericError as exc:
        dump = {k: float(v) for k, v in zip(("sup", "cl_ls", "cl_hs", "w2s_l", "w2s_h"),
                                            (sup, cl_ls, cl_hs, w2s_l, w2s_h))}
        raise NumericError(f"{exc}; per-term values: {dump}") from None
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    ema_update(teacher, student)
    return LossBundle(sup.detach(), cl_ls.detach(), cl_hs.detach(), w2s_l.detach(), w2s_h.detach(),
                      total.detach(), n_sel_l, n_sel_h)


# --- batching ----------------------------------------------------------------


class _Pool:
    """In-memory images (and masks) of one side of the split."""

    def __init__(self, index: DatasetIndex, ids: Sequence[str], with_masks: bool, dtype: torch.dtype):
        imgs, masks = load_arrays(index, ids, with_masks=with_masks)
        self.ids = list(ids)
        self.images = torch.from_numpy(imgs).to(dtype)
        self.masks = torch.from_numpy(masks) if masks is not None else None

    def __len__(self):
        return len(self.ids)


def _weak_batch(pool: _Pool, rows: Sequence[int], seeds: Sequence, cfg: AugConfig):
    imgs, masks = [], []
    for r, s in zip(rows, seeds):
        if pool.masks is not None:
            m = pool.masks[r]
        else:
            m = torch.zeros(pool.images.shape[-2:], dtype=torch.int64)
        img, m = A.aug_weak(pool.images[r], m, s, cfg)
        imgs.append(img)
        masks.append(m)
    return torch.stack(imgs), torch.stack(masks)


def iterations_per_epoch(n_labeled: int, config: TrainConfig) -> int:
    return math.ceil(n_labeled / config.batch_labeled)


def unlabeled_rows(step: int, n_u: int, config: TrainConfig) -> list[int]:
    """Rows of global step ``step``: the unlabeled set is cycled in per-cycle permutations."""
    b = config.batch_unlabeled
    rows = []
    perms: dict[int, np.ndarray] = {}
    for p in range(step * b, (step + 1) * b):
        cycle = p // n_u
        if cycle not in perms:
            perms[cycle] = np.random.default_rng([config.seed, 2, cycle]).permutation(n_u)
        rows.append(int(perms[cycle][p % n_u]))
    return rows


def run_epoch(state: TrainState, config: TrainConfig, lab: _Pool, unl: Optional[_Pool]) -> dict:
    epoch = state.epoch
    lr = lr_at(epoch, config)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    iters = iterations_per_epoch(len(lab), config)
    order = np.random.default_rng([config.seed, 1, epoch]).permutation(len(lab))
    sums: dict[str, float] = {}
    for k in range(iters):
        rows = order[k * config.batch_labeled:(k + 1) * config.batch_labeled].tolist()
        x_l, t_l = _weak_batch(lab, rows, [(config.seed, 3, epoch, k, j) for j in range(len(rows))], config.aug)
        u_batch = None
        if unl is not None and len(unl) and epoch >= config.warmup_epochs:
            urows = unlabeled_rows(epoch * iters + k, len(unl), config)
            x_u, pad = _weak_batch(unl, urows, [(config.seed, 4, epoch, k, j) for j in range(len(urows))], config.aug)
            u_batch = (x_u, pad != IGNORE)
        bundle = train_step((x_l, t_l), u_batch, state, config, (config.seed, 5, epoch, k))
        for key, val in bundle.as_floats().items():
            sums[key] = sums.get(key, 0.0) + val
    state.epoch += 1
    row = {"epoch": state.epoch, "lr": lr}
    for key in ("sup", "cl_ls", "cl_hs", "w2s_l", "w2s_h", "total"):
        row[f"loss_{key}"] = sums[key] / iters
    row["selected_px_l"] = sums["selected_px_l"] / iters
    row["selected_px_h"] = sums["selected_px_h"] / iters
    return row


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(state: TrainState, path, config: Optional[TrainConfig] = None) -> None:
    path = Path(path)
    blob = {
        "format_version": CHECKPOINT_VERSION,
        "config_hash": state.config_hash,
        "config": to_dict(config) if config is not None else None,
        "arch": to_dict(state.student.arch),
        "dtype": str(next(state.student.parameters()).dtype),
        "student": state.student.state_dict(),
        "teacher": state.teacher.params.state_dict(),
        "alpha": state.teacher.alpha,
        "optimizer": state.optimizer.state_dict(),
        "epoch": state.epoch,
        "history": state.history,
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(blob, tmp)
    os.replace(tmp, path)


def load_checkpoint(path, config: Optional[TrainConfig] = None, num_classes: Optional[int] = None) -> TrainState:
    """Restore a TrainState. ``config`` (if given) must hash to the stored config hash."""
    path = Path(path)
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise OSError(f"checkpoint not found: {path}") from None
    except Exception as exc:  # torch raises a zoo of unpickling errors
        raise OSError(f"cannot read checkpoint {path}: {exc}") from None
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"checkpoint {path} has format version {blob.get('format_version')} (config hash "
            f"{blob.get('config_hash')}); expected version {CHECKPOINT_VERSION}"
        )
    if config is not None and config_hash(config) != blob["config_hash"]:
        raise ValidationError(
            f"checkpoint {path} was written with config hash {blob['config_hash']}, current config hash is "
            f"{config_hash(config)}"
        )
    arch = Arch(**{k: tuple(v) if isinstance(v, list) else v for k, v in blob["arch"].items()})
    if num_classes is not None and arch.num_classes != num_classes:
        raise ValidationError(f"checkpoint {path} has num_classes={arch.num_classes}, expected {num_classes}")
    dtype = torch.float64 if blob["dtype"] == "torch.float64" else torch.float32
    student = SegNet(arch).to(dtype)
    student.load_state_dict(blob["student"])
    teacher_net = SegNet(arch).to(dtype)
    teacher_net.load_state_dict(blob["teacher"])
    teacher = TeacherState(teacher_net, blob["alpha"])
    if config is not None:
        opt = make_optimizer(student, config)
    else:
        opt = torch.optim.SGD(student.parameters(), lr=1.0)
    opt.load_state_dict(blob["optimizer"])
    torch.set_rng_state(blob["torch_rng"])
    return TrainState(student, teacher, opt, blob["epoch"], list(blob["history"]), blob["config_hash"])


def stored_config(path) -> Optional[dict]:
    return torch.load(path, map_location="cpu", weights_only=False).get("config")


# --- full loop -----------------------------------------------------------------


@dataclass
class TrainReport:
    best_miou: float
    best_epoch: int
    final_miou_teacher: float
    final_miou_student: float
    history: list
    run_dir: Optional[Path]
    state: TrainState


def write_metrics(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        for row in history:
            writer.writerow(["" if row.get(k) is None else repr(row[k]) for k in METRICS_HEADER])


def latest_checkpoint(run_dir) -> Optional[Path]:
    found = []
    for p in Path(run_dir).glob("ckpt_*"):
        tail = p.name[len("ckpt_"):]
        if tail.isdigit():
            found.append((int(tail), p))
    return max(found)[1] if found else None


def train(config: TrainConfig, labeled: DatasetIndex, unlabeled: Optional[DatasetIndex] = None,
          val: Optional[DatasetIndex] = None, run_dir=None, resume: bool = False,
          stop_after: Optional[int] = None) -> TrainReport:
    """Run (or resume) training.

    ``labeled.labeled_ids`` supervise; ``unlabeled.unlabeled_ids`` (defaults to the
    same index) feed the unsupervised branch. ``stop_after`` ends the call after
    that many epochs, as if interrupted; a later ``resume=True`` call continues.
    """
    if not labeled.labeled_ids:
        raise ValidationError("no labeled items")
    if labeled.num_classes != config.arch.num_classes:
        raise ValidationError(
            f"dataset has {labeled.num_classes} classes but arch.num_classes={config.arch.num_classes}"
        )
    if config.deterministic:
        torch.set_num_threads(1)
    unlabeled = labeled if unlabeled is None else unlabeled
    dtype = config.torch_dtype
    lab = _Pool(labeled, labeled.labeled_ids, True, dtype)
    unl = None
    if not config.supervised_only:
        if not unlabeled.unlabeled_ids:
            raise ValidationError("no unlabeled items for the semi-supervised branch")
        unl = _Pool(unlabeled, unlabeled.unlabeled_ids, False, dtype)

    run_dir = Path(run_dir) if run_dir is not None else None
    state = None
    if resume and run_dir is not None:
        ck = latest_checkpoint(run_dir)
        if ck is not None:
            state = load_checkpoint(ck, config, labeled.num_classes)
            log.info("resumed from %s at epoch %d", ck, state.epoch)
    if state is None:
        state = init_state(config)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.json").write_text(json.dumps(to_dict(config), indent=2, sort_keys=True) + "\n")

    done = 0
    while state.epoch < config.epochs:
        if stop_after is not None and done >= stop_after:
            break
        row = run_epoch(state, config, lab, unl)
        ep = state.epoch
        row["val_miou_teacher"] = row["val_miou_student"] = None
        if val is not None and config.eval_every and (ep % config.eval_every == 0 or ep == config.epochs):
            row["val_miou_teacher"] = evaluate(state.teacher.params, val).miou
            row["val_miou_student"] = evaluate(state.student, val).miou
        state.history.append(row)
        log.info("epoch %d lr %.5f total %.4f sup %.4f miou(t) %s", ep, row["lr"], row["loss_total"],
                 row["loss_sup"], row["val_miou_teacher"])
        if run_dir is not None:
            write_metrics(state.history, run_dir / "metrics.csv")
            if (config.checkpoint_every and ep % config.checkpoint_every == 0) or ep == config.epochs:
                save_checkpoint(state, run_dir / f"ckpt_{ep}", config)
        done += 1

    scored = [(r["val_miou_teacher"], r["epoch"]) for r in state.history if r["val_miou_teacher"] is not None]
    best_miou, best_epoch = max(scored, key=lambda t: (t[0], -t[1])) if scored else (float("nan"), 0)
    last = state.history[-1] if state.history else {}
    return TrainReport(
        best_miou=best_miou,
        best_epoch=best_epoch,
        final_miou_teacher=last.get("val_miou_teacher") if last.get("val_miou_teacher") is not None else float("nan"),
        final_miou_student=last.get("val_miou_student") if last.get("val_miou_student") is not None else float("nan"),
        history=state.history,
        run_dir=run_dir,
        state=state,
    )


def variant(config: TrainConfig, **changes) -> TrainConfig:
    """Copy of ``config`` with top-level fields replaced."""
    return replace(config, **changes)
