"""CSV metrics writers and chart rendering for evaluation reports.

CSV layouts:
  loss curves  -> ``stage,epoch,step,l_r,l_vae,l_l2,total``
  accuracy     -> ``variant,ratio,accuracy,n``
  per-head MSE -> ``variant,head,mse``
"""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import MetricsReport  # noqa: E402

LOSS_FIELDS = ("stage", "epoch", "step", "l_r", "l_vae", "l_l2", "total")


def write_loss_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOSS_FIELDS})
    return path


def write_accuracy_csv(reports: Sequence[MetricsReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "ratio", "accuracy", "n"])
        for rep in reports:
            for ratio in sorted(rep.accuracy_by_ratio):
                writer.writerow([rep.variant, ratio,
                                 rep.accuracy_by_ratio[ratio], rep.n_eval])
    return path


def write_mse_csv(reports: Sequence[MetricsReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "head", "mse"])
        for rep in reports:
            for head, value in rep.per_head_mse.items():
                writer.writerow([rep.variant, head, value])
    return path


def accuracy_chart(reports: Sequence[MetricsReport], path) -> Path:
    """Accuracy-vs-observation-ratio SVG, one polyline per variant."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        ratios = sorted(rep.accuracy_by_ratio)
        ax.plot(ratios, [rep.accuracy_by_ratio[r] for r in ratios],
                marker="o", label=rep.variant)
    ax.set_xlabel("observation ratio")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_xlim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def flow_magnitude_png(raw_flow: np.ndarray, path) -> Path:
    """Mean flow-magnitude image of a (T-1,H,W,2) clip as a PNG."""
    path = Path(path)
    mag = np.sqrt(raw_flow[..., 0] ** 2 + raw_flow[..., 1] ** 2).mean(axis=0)
    plt.imsave(path, mag, cmap="viridis", format="png")
    return path
