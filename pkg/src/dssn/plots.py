"""Static figures: loss curves, per-class IoU bars, threshold comparison bars."""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_COLUMNS = ("loss_sup", "loss_cl_ls", "loss_cl_hs", "loss_w2s_l", "loss_w2s_h", "loss_total")
PLOT_KINDS = ("loss", "iou", "thresholds")
PLOT_FILES = {"loss": "loss_curves.png", "iou": "iou_bars.png", "thresholds": "threshold_bars.png"}


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise OSError(f"missing metrics file {path}")
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_losses(metrics_csv, out) -> list[str]:
    rows = read_metrics(metrics_csv)
    if not rows:
        raise OSError(f"{metrics_csv} has no epochs")
    epochs = [int(r["epoch"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    drawn = []
    for col in LOSS_COLUMNS:
        vals = [float(r[col]) for r in rows]
        if any(v != 0 for v in vals):
            ax.plot(epochs, vals, label=col[5:])
            drawn.append(col)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return drawn


def plot_iou_bars(per_class_iou: Sequence[Optional[float]], out, class_names: Sequence[str] = ()) -> list[float]:
    """Bar per class (excluded classes drawn at 0); returns the drawn bar heights."""
    names = list(class_names) or [str(j) for j in range(len(per_class_iou))]
    heights = [0.0 if v is None else float(v) for v in per_class_iou]
    fig, ax = plt.subplots(figsize=(6, 4))
    bars = ax.bar(names, heights, color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return [b.get_height() for b in bars]


def plot_iou_from_eval(eval_json, out, class_names: Sequence[str] = ()) -> list[float]:
    data = json.loads(Path(eval_json).read_text())
    return plot_iou_bars(data["per_class_iou"], out, class_names)


def plot_thresholds(summary_csv, out) -> dict:
    """Grouped bars of per-class recall (or selected count without ground truth) per method."""
    with open(summary_csv, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise OSError(f"{summary_csv} is empty")
    key = "recall" if all(r["gt_pixels"] != "" for r in rows) else "selected"
    methods = list(dict.fromkeys(r["method"] for r in rows))
    classes = sorted({int(r["class"]) for r in rows})
    values = {m: [0.0] * len(classes) for m in methods}
    for r in rows:
        values[r["method"]][classes.index(int(r["class"]))] = float(r[key]) if r[key] else 0.0
    width = 0.8 / len(methods)
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, m in enumerate(methods):
        ax.bar([c + k * width for c in range(len(classes))], values[m], width, label=m)
    ax.set_xticks([c + 0.4 - width / 2 for c in range(len(classes))], [str(c) for c in classes])
    ax.set_xlabel("class")
    ax.set_ylabel(f"pseudo-label {key}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return values
