"""Segmentation metrics and per-subset evaluation reports.

Robustness to missing modalities is summarized by evaluating every
non-empty modality subset and aggregating the per-subset scores three ways:
the mean over subsets ("average"), the best subset ("top1"), and the worst
subset ("last1"). The worst-case number is what degrades first when a
model leans on one dominant sensor.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

__all__ = [
    "enumerate_subsets",
    "subset_name",
    "confusion_matrix",
    "iou_per_class",
    "f1_per_class",
    "mean_iou",
    "mean_f1",
    "aggregate",
    "SubsetMetrics",
    "MetricsReport",
    "evaluate_model",
]


def enumerate_subsets(modalities: list[str] | tuple[str, ...]) -> list[tuple[str, ...]]:
    """All non-empty subsets, ordered by size then position in the input."""
    if not modalities:
        raise ValueError("no modalities to enumerate")
    if len(set(modalities)) != len(modalities):
        raise ValueError(f"duplicate modality names: {list(modalities)}")
    out: list[tuple[str, ...]] = []
    for size in range(1, len(modalities) + 1):
        out.extend(combinations(modalities, size))
    return out


def subset_name(subset: tuple[str, ...] | list[str]) -> str:
    return "+".join(subset)


def confusion_matrix(
    pred: np.ndarray, target: np.ndarray, num_classes: int, ignore_index: int = 255
) -> np.ndarray:
    """Accumulate a (K, K) matrix with true classes on rows.

    Ignored target pixels contribute nowhere. Predictions must already be
    class indices in [0, K).
    """
    pred = np.asarray(pred).reshape(-1)
    target = np.asarray(target).reshape(-1)
    if pred.shape != target.shape:
        raise ValueError(f"prediction size {pred.shape} != target size {target.shape}")
    keep = target != ignore_index
    pred, target = pred[keep], target[keep]
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        raise ValueError(f"predictions outside [0, {num_classes})")
    if target.size and (target.min() < 0 or target.max() >= num_classes):
        raise ValueError(f"targets outside [0, {num_classes}) after masking")
    flat = target * num_classes + pred
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return counts.reshape(num_classes, num_classes).astype(np.int64)


def _components(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    matrix = np.asarray(matrix, dtype=np.float64)
    tp = np.diag(matrix)
    fn = matrix.sum(axis=1) - tp
    fp = matrix.sum(axis=0) - tp
    present = (tp + fp + fn) > 0  # class appears in target or prediction
    return tp, fp, fn, present


def iou_per_class(matrix: np.ndarray) -> dict[int, float]:
    """Intersection over union per class, skipping classes absent everywhere."""
    tp, fp, fn, present = _components(matrix)
    return {
        int(k): float(tp[k] / (tp[k] + fp[k] + fn[k])) for k in np.flatnonzero(present)
    }


def f1_per_class(matrix: np.ndarray) -> dict[int, float]:
    """Dice / F1 per class: 2TP / (2TP + FP + FN), same class skipping as IoU."""
    tp, fp, fn, present = _components(matrix)
    return {
        int(k): float(2 * tp[k] / (2 * tp[k] + fp[k] + fn[k])) for k in np.flatnonzero(present)
    }


def _mean(values: dict[int, float]) -> float:
    if not values:
        raise ValueError("no class is present in target or prediction; metric undefined")
    return float(np.mean(list(values.values())))


def mean_iou(matrix: np.ndarray) -> float:
    return _mean(iou_per_class(matrix))


def mean_f1(matrix: np.ndarray) -> float:
    return _mean(f1_per_class(matrix))


def aggregate(per_subset: list[float]) -> dict[str, float]:
    """Mean / best / worst over per-subset scores."""
    if not per_subset:
        raise ValueError("no subset scores to aggregate")
    return {
        "average": float(np.mean(per_subset)),
        "top1": float(np.max(per_subset)),
        "last1": float(np.min(per_subset)),
    }


@dataclass
class SubsetMetrics:
    subset: tuple[str, ...]
    miou: float
    mf1: float
    iou: dict[int, float]
    f1: dict[int, float]

    @property
    def name(self) -> str:
        return subset_name(self.subset)


@dataclass
class MetricsReport:
    """Per-subset scores plus the three-way aggregate.

    ``complete`` marks reports covering every non-empty subset of the
    model's modalities; only those enforce the subset-count invariant.
    """

    modalities: tuple[str, ...]
    subsets: list[SubsetMetrics]
    complete: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.complete:
            expected = enumerate_subsets(list(self.modalities))
            got = [s.subset for s in self.subsets]
            if got != expected:
                raise ValueError(
                    f"complete report must cover subsets {list(map(subset_name, expected))} "
                    f"in order, got {list(map(subset_name, got))}"
                )
        agg = self.aggregate_miou
        if not (agg["last1"] - 1e-12 <= agg["average"] <= agg["top1"] + 1e-12):
            raise ValueError("aggregate ordering violated")

    @property
    def aggregate_miou(self) -> dict[str, float]:
        return aggregate([s.miou for s in self.subsets])

    @property
    def aggregate_mf1(self) -> dict[str, float]:
        return aggregate([s.mf1 for s in self.subsets])

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "complete": self.complete,
            "subsets": [
                {
                    "subset": list(s.subset),
                    "miou": s.miou,
                    "mf1": s.mf1,
                    "iou": {str(k): v for k, v in s.iou.items()},
                    "f1": {str(k): v for k, v in s.f1.items()},
                }
                for s in self.subsets
            ],
            "aggregate": {"miou": self.aggregate_miou, "mf1": self.aggregate_mf1},
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MetricsReport":
        return cls(
            modalities=tuple(payload["modalities"]),
            subsets=[
                SubsetMetrics(
                    subset=tuple(s["subset"]),
                    miou=float(s["miou"]),
                    mf1=float(s["mf1"]),
                    iou={int(k): float(v) for k, v in s["iou"].items()},
                    f1={int(k): float(v) for k, v in s["f1"].items()},
                )
                for s in payload["subsets"]
            ],
            complete=bool(payload.get("complete", True)),
            extra=payload.get("extra", {}),
        )

    def save_json(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_json(cls, path: Path | str) -> "MetricsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        """Delimited per-subset table with the aggregate rows appended."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["subset", "miou", "mf1"])
        for s in self.subsets:
            writer.writerow([s.name, f"{s.miou:.6f}", f"{s.mf1:.6f}"])
        miou, mf1 = self.aggregate_miou, self.aggregate_mf1
        for key, label in [("average", "average"), ("top1", "top1"), ("last1", "last1")]:
            writer.writerow([label, f"{miou[key]:.6f}", f"{mf1[key]:.6f}"])
        return buf.getvalue()

    def save_csv(self, path: Path | str) -> None:
        Path(path).write_text(self.to_csv())


def evaluate_model(
    model,
    bundles,
    num_classes: int,
    ignore_index: int = 255,
    subsets: list[tuple[str, ...]] | None = None,
    variant: str = "c",
) -> MetricsReport:
    """Score a model over modality subsets of labeled bundles.

    When ``subsets`` is None every non-empty subset of the first bundle's
    modalities is evaluated (the complete report); otherwise only the given
    subsets are scored and the report is marked partial.
    """
    from .model import predict_labels  # local import to avoid a cycle

    if not bundles:
        raise ValueError("no bundles to evaluate")
    modalities = tuple(bundles[0].modalities)
    complete = subsets is None
    chosen = enumerate_subsets(list(modalities)) if subsets is None else [tuple(s) for s in subsets]

    results = []
    for subset in chosen:
        matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
        for bundle in bundles:
            if bundle.labels is None:
                raise ValueError(f"sample '{bundle.sample_id}' has no labels")
            pred = predict_labels(model, bundle, subset=subset, variant=variant).cpu().numpy()
            matrix += confusion_matrix(pred, bundle.labels, num_classes, ignore_index)
        results.append(
            SubsetMetrics(
                subset=subset,
                miou=mean_iou(matrix),
                mf1=mean_f1(matrix),
                iou=iou_per_class(matrix),
                f1=f1_per_class(matrix),
            )
        )
    return MetricsReport(modalities=modalities, subsets=results, complete=complete)
