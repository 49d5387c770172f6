"""Command line: gen-data, train, eval, analyze-pseudo, plot.

Exit status is 0 on success, 2 on a validation error and 1 on any other failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from .analysis import FIXED_DEFAULT, analyze_pseudo, summarize, write_rows, write_summary
from .common import NumericError, ValidationError, to_dict
from .config import ExperimentConfig, load_config
from .evaluation import evaluate
from .losses import LossWeights
from .plots import PLOT_FILES, PLOT_KINDS, plot_iou_from_eval, plot_losses, plot_thresholds
from .synthdata import generate_dataset, open_dataset, split_dataset, write_split
from .trainer import TrainConfig, latest_checkpoint, load_checkpoint, train

log = logging.getLogger("dssn")

SPLIT_NAME = "labeled"


def runs_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get("DSSN_RUNS_DIR") or cfg.runs_dir)


def run_dir_of(cfg: ExperimentConfig, args) -> Path:
    return runs_root(cfg) / (args.run or cfg.run_name)


def _require(value: str, name: str) -> Path:
    if not value:
        raise ValidationError(f"{name} is not set")
    return Path(value)


# --- commands ------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, args) -> int:
    data = cfg.data
    synth = data.synth if args.seed is None else replace(data.synth, seed=args.seed)
    train_root = _require(data.train_root, "data.train_root")
    targets = [(train_root, synth)]
    if data.val_root and data.num_val_images:
        targets.append((Path(data.val_root), replace(synth, num_images=data.num_val_images, seed=data.val_seed)))
    for root, spec in targets:
        meta = root / "meta.json"
        if meta.exists() and not args.force:
            stored = json.loads(meta.read_text()).get("generator_spec")
            if stored != to_dict(spec):
                raise ValidationError(f"{root} holds a different dataset; pass --force to overwrite")
        elif meta.exists():
            shutil.rmtree(root)
        index = generate_dataset(spec, root, workers=args.workers)
        print(f"wrote {len(index.ids)} images to {root}")
    split = split_dataset(open_dataset(train_root), data.labeled_fraction, data.split_seed)
    path = write_split(split, SPLIT_NAME)
    print(f"split {path}: {len(split.labeled_ids)} labeled, {len(split.unlabeled_ids)} unlabeled")
    return 0


def _train_config(cfg: ExperimentConfig, args) -> TrainConfig:
    tc = cfg.train
    if args.seed is not None:
        tc = replace(tc, seed=args.seed)
    if args.epochs is not None:
        tc = replace(tc, epochs=args.epochs)
    if args.supervised_only:
        tc = replace(tc, weights=LossWeights(0.0, 0.0))
    if args.fixed_threshold is not None:
        tc = replace(tc, selection="fixed", fixed_threshold=args.fixed_threshold)
    return tc


def _train_split(cfg: ExperimentConfig):
    root = _require(cfg.data.train_root, "data.train_root")
    if (root / "splits" / f"{SPLIT_NAME}.txt").exists():
        return open_dataset(root, SPLIT_NAME)
    return split_dataset(open_dataset(root), cfg.data.labeled_fraction, cfg.data.split_seed)


def cmd_train(cfg: ExperimentConfig, args) -> int:
    tc = _train_config(cfg, args)
    index = _train_split(cfg)
    val = open_dataset(cfg.data.val_root) if cfg.data.val_root else None
    run_dir = run_dir_of(cfg, args)
    if run_dir.exists() and any(run_dir.iterdir()) and not args.resume:
        if not args.force:
            raise ValidationError(f"run directory {run_dir} exists; pass --force to replace it or --resume")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = replace(cfg, train=tc)
    (run_dir / "experiment.json").write_text(json.dumps(to_dict(snapshot), indent=2, sort_keys=True) + "\n")
    report = train(tc, index, index, val, run_dir=run_dir, resume=args.resume, stop_after=args.stop_after)
    summary = {
        "epochs_done": len(report.history),
        "best_miou": report.best_miou,
        "best_epoch": report.best_epoch,
        "final_miou_teacher": report.final_miou_teacher,
        "final_miou_student": report.final_miou_student,
    }
    (run_dir / "report.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))
    return 0


def _checkpoint(cfg: ExperimentConfig, args) -> Path:
    if args.checkpoint:
        return Path(args.checkpoint)
    run_dir = run_dir_of(cfg, args)
    ck = latest_checkpoint(run_dir) if run_dir.exists() else None
    if ck is None:
        raise OSError(f"no checkpoint found in {run_dir}")
    return ck


def _net(state, which: str):
    return state.teacher.params if which == "teacher" else state.student


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    ck = _checkpoint(cfg, args)
    dataset = Path(args.dataset or _require(cfg.data.val_root, "data.val_root"))
    index = open_dataset(dataset)
    state = load_checkpoint(ck, num_classes=index.num_classes)
    metrics = evaluate(_net(state, args.which), index)
    out = Path(args.out) if args.out else run_dir_of(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(metrics.to_json(), indent=2, sort_keys=True) + "\n")
    plot_iou_from_eval(out / "eval.json", out / PLOT_FILES["iou"], index.class_names)
    print(json.dumps(metrics.to_json()))
    return 0


def cmd_analyze_pseudo(cfg: ExperimentConfig, args) -> int:
    ck = _checkpoint(cfg, args)
    dataset = Path(args.dataset or _require(cfg.data.val_root, "data.val_root"))
    index = open_dataset(dataset)
    state = load_checkpoint(ck, num_classes=index.num_classes)
    fixed = tuple(args.fixed) if args.fixed else FIXED_DEFAULT
    rows = analyze_pseudo(_net(state, args.which), index, params=cfg.train.cplg, fixed=fixed)
    out = Path(args.out) if args.out else run_dir_of(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(rows, out / "pseudo_labels.csv")
    summary = summarize(rows)
    write_summary(summary, out / "pseudo_summary.csv")
    for s in summary:
        print(f"class {s.cls} {s.method:12s} selected {s.selected:7d} precision {s.precision} recall {s.recall}")
    return 0


def cmd_plot(cfg: ExperimentConfig, args) -> int:
    run_dir = Path(args.dir) if args.dir else run_dir_of(cfg, args)
    metrics = run_dir / "metrics.csv"
    if not metrics.exists():
        raise OSError(f"missing {metrics}")
    kinds = args.kinds.split(",") if args.kinds else [
        k for k, src in (("loss", "metrics.csv"), ("iou", "eval.json"), ("thresholds", "pseudo_summary.csv"))
        if (run_dir / src).exists()
    ]
    unknown = sorted(set(kinds) - set(PLOT_KINDS))
    if unknown:
        raise ValidationError(f"unknown plot kind(s) {unknown}; choose from {list(PLOT_KINDS)}")
    for kind in kinds:
        target = run_dir / PLOT_FILES[kind]
        if kind == "loss":
            plot_losses(metrics, target)
        elif kind == "iou":
            plot_iou_from_eval(run_dir / "eval.json", target)
        else:
            plot_thresholds(run_dir / "pseudo_summary.csv", target)
        print(f"wrote {target}")
    return 0


# --- argument parsing ----------------------------------------------------------


def _global_flags() -> argparse.ArgumentParser:
    # SUPPRESS lets the flags appear before or after the subcommand without clobbering each other
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="experiment JSON file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed")
    p.add_argument("--run", default=argparse.SUPPRESS, help="run name (directory under the run root)")
    p.add_argument("--force", action="store_true", default=argparse.SUPPRESS, help="overwrite existing outputs")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="dssn", parents=[common], description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic long-tailed dataset")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--supervised-only", action="store_true", help="set both unsupervised weights to 0")
    p.add_argument("--fixed-threshold", type=float, help="use one fixed threshold instead of CPLG")
    p.add_argument("--resume", action="store_true", help="continue from the run's last checkpoint")
    p.add_argument("--epochs", type=int)
    p.add_argument("--stop-after", type=int, help=argparse.SUPPRESS)

    for name, help_ in (("eval", "evaluate a checkpoint"), ("analyze-pseudo", "compare pseudo-label selection")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", help="checkpoint file (default: latest in the run directory)")
        p.add_argument("--dataset", help="dataset root (default: data.val_root)")
        p.add_argument("--which", choices=("teacher", "student"), default="teacher")
        p.add_argument("--out", help="output directory (default: the run directory)")
        if name == "analyze-pseudo":
            p.add_argument("--fixed", type=float, nargs="+", help="fixed thresholds to compare")

    p = sub.add_parser("plot", parents=[common], help="render figures for a run directory")
    p.add_argument("--dir", help="run directory (default: from --run / config)")
    p.add_argument("--kinds", help=f"comma-separated subset of {','.join(PLOT_KINDS)}")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze-pseudo": cmd_analyze_pseudo,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    for name, default in (("config", None), ("seed", None), ("run", None), ("force", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](cfg, args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, NumericError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
