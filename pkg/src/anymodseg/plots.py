"""Figure rendering for evaluation and diagnostics reports.

Every function takes a report object (or a saved report file) and writes
PNG figures next to the delimited outputs, returning the written paths.
The Agg backend keeps rendering headless-safe.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .diagnostics import DiagnosticsReport
from .metrics import MetricsReport

__all__ = ["plot_metrics", "plot_robustness", "plot_variance", "plot_training", "render_all"]

# pinned metadata keeps PNG bytes identical across reruns of the same report
_PNG_METADATA = {"Software": "anymodseg"}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=150, metadata=_PNG_METADATA)
    plt.close(fig)
    return path


def plot_metrics(report: MetricsReport, out_dir: Path | str) -> list[Path]:
    """Per-subset mIoU/F1 bars with the three aggregate levels marked."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = [s.name for s in report.subsets]
    miou = [s.miou for s in report.subsets]
    mf1 = [s.mf1 for s in report.subsets]
    agg = report.aggregate_miou

    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(names)), 4.0))
    x = np.arange(len(names))
    ax.bar(x - 0.2, miou, width=0.4, label="mIoU", color="#4878a8")
    ax.bar(x + 0.2, mf1, width=0.4, label="mF1", color="#e0a04f")
    for key, style in [("average", "--"), ("top1", ":"), ("last1", "-.")]:
        ax.axhline(agg[key], linestyle=style, linewidth=1.0, color="gray")
        ax.annotate(
            f"{key} {agg[key]:.3f}",
            xy=(len(names) - 0.5, agg[key]),
            fontsize=8,
            va="bottom",
            ha="right",
            color="gray",
        )
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.05)
    ax.set_title("per-subset segmentation quality")
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    return [_save(fig, out_dir / "metrics_subsets.png")]


def plot_robustness(report: DiagnosticsReport, out_dir: Path | str) -> list[Path]:
    """Grouped bars: each modality's mean fusion share at every scale."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not report.robustness:
        return []
    scales = len(report.robustness)
    modalities = list(report.robustness[0])
    width = 0.8 / len(modalities)

    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    x = np.arange(scales)
    for j, m in enumerate(modalities):
        shares = [report.robustness[i].get(m, 0.0) for i in range(scales)]
        ax.bar(x + (j - (len(modalities) - 1) / 2) * width, shares, width=width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels([f"scale {i + 1}" for i in range(scales)])
    ax.set_ylabel("mean robustness share")
    ax.set_title("modality contributions per scale")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return [_save(fig, out_dir / "robustness_scales.png")]


def plot_variance(report: DiagnosticsReport, out_dir: Path | str) -> list[Path]:
    """Radar chart of per-class intra-class variance, one line per scale."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not report.variance:
        return []
    classes = sorted({k for scale in report.variance for k in scale})
    if not classes:
        return []
    angles = [2 * math.pi * i / len(classes) for i in range(len(classes))]

    fig, ax = plt.subplots(figsize=(5.0, 5.0), subplot_kw={"projection": "polar"})
    for i, scale in enumerate(report.variance):
        values = [scale.get(k, 0.0) for k in classes]
        ax.plot(angles + angles[:1], values + values[:1], label=f"scale {i + 1}", linewidth=1.2)
    ax.set_xticks(angles)
    ax.set_xticklabels([f"class {k}" for k in classes], fontsize=8)
    ax.set_title("intra-class feature variance", pad=18)
    ax.legend(loc="upper right", bbox_to_anchor=(1.25, 1.1), fontsize=8)
    fig.tight_layout()
    return [_save(fig, out_dir / "variance_radar.png")]


def plot_training(log_path: Path | str, out_dir: Path | str) -> list[Path]:
    """Loss curves and the learning-rate schedule from a JSONL training log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = [json.loads(line) for line in Path(log_path).read_text().splitlines() if line]
    if not records:
        return []
    epochs = [r["epoch"] for r in records]

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    ax1.plot(epochs, [r["loss_total"] for r in records], label="total", color="#333333")
    ax1.plot(epochs, [r["loss_sgf"] for r in records], label="fusion", color="#4878a8")
    if any(r.get("loss_mas") is not None for r in records):
        ax1.plot(
            epochs,
            [r["loss_mas"] if r.get("loss_mas") is not None else float("nan") for r in records],
            label="sampling",
            color="#e0a04f",
        )
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(epochs, [r["lr"] for r in records], color="#4878a8")
    ax2.set_xlabel("epoch")
    ax2.set_ylabel("learning rate")
    fig.tight_layout()
    return [_save(fig, out_dir / "training_curves.png")]


def render_all(source: Path | str, out_dir: Path | str | None = None) -> list[Path]:
    """Re-render every figure derivable from report files in ``source``.

    Figures go to ``out_dir`` (default: next to the reports).
    """
    source = Path(source)
    out_dir = source if out_dir is None else Path(out_dir)
    written: list[Path] = []
    metrics_path = source / "metrics.json"
    if metrics_path.exists():
        written += plot_metrics(MetricsReport.load_json(metrics_path), out_dir)
    diag_path = source / "diagnostics.json"
    if diag_path.exists():
        report = DiagnosticsReport.load_json(diag_path)
        written += plot_robustness(report, out_dir)
        written += plot_variance(report, out_dir)
    log_path = source / "train_log.jsonl"
    if log_path.exists():
        written += plot_training(log_path, out_dir)
    return written
