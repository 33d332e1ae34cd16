"""Introspection reports: robustness shares, feature compactness, complexity.

These quantify *why* a fused model behaves as it does:

- robustness scalars: per scale, each modality's mean share of the fusion
  attention, i.e. how much the model currently leans on each sensor;
- intra-class variance: how tightly fused features cluster within a class
  (lower is better separated);
- silhouette (optional): cluster quality of per-modality semantic features;
- complexity: closed-form parameter and FLOP counts from layer dimensions.

FLOP convention: multiply-accumulates of weight matrices only (convolutions,
linear maps, attention logits and value mixing). Bias adds, normalization,
activations, softmax and interpolation are excluded; they are lower-order
on every path counted here.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .encoder import STAGE_STRIDES, collate_bundles
from .model import ModelConfig, MultimodalSegmenter

__all__ = [
    "intra_class_variance",
    "downsample_labels",
    "robustness_scalars",
    "complexity_report",
    "DiagnosticsReport",
    "collect_diagnostics",
]


def downsample_labels(labels: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor label map at a coarser feature grid (cell centers)."""
    h, w = labels.shape
    gh, gw = grid
    rows = ((np.arange(gh) + 0.5) * h / gh).astype(np.int64)
    cols = ((np.arange(gw) + 0.5) * w / gw).astype(np.int64)
    return labels[np.ix_(rows, cols)]


def intra_class_variance(
    features: np.ndarray | torch.Tensor,
    labels: np.ndarray,
    ignore_index: int = 255,
) -> dict[int, float]:
    """Spread of normalized features within each class at one scale.

    ``features`` is (H, W, C); ``labels`` is a full-resolution map that is
    downsampled to the feature grid. Channels are standardized by their
    per-map standard deviation first so wide channels cannot dominate. For
    a class with n >= 2 member pixels the score is the mean squared
    distance to the class centroid with the unbiased 1/(n-1) normalizer
    (so two members u, v score |u - v|^2 / 2). Classes with fewer than two
    members are omitted.
    """
    if isinstance(features, torch.Tensor):
        features = features.detach().cpu().numpy()
    if features.ndim != 3:
        raise ValueError(f"expected (H, W, C) features, got shape {features.shape}")
    h, w, c = features.shape
    flat = features.reshape(-1, c).astype(np.float64)
    std = flat.std(axis=0)
    flat = flat / np.maximum(std, 1e-12)
    grid_labels = labels if labels.shape == (h, w) else downsample_labels(labels, (h, w))
    grid_labels = grid_labels.reshape(-1)

    out: dict[int, float] = {}
    for k in np.unique(grid_labels):
        if k == ignore_index:
            continue
        members = flat[grid_labels == k]
        n = members.shape[0]
        if n < 2:
            continue
        centroid = members.mean(axis=0)
        out[int(k)] = float(((members - centroid) ** 2).sum() / (n - 1))
    return out


def robustness_scalars(
    per_sample: list[list[torch.Tensor]], modalities: list[str] | tuple[str, ...]
) -> list[dict[str, float]]:
    """Mean robustness share per modality at each scale.

    ``per_sample[s][i]`` is sample s's (B, M, H, W) robustness at scale i.
    Each scale's scalars sum to 1: they are means of per-pixel
    distributions.
    """
    if not per_sample:
        raise ValueError("no robustness maps supplied")
    num_scales = len(per_sample[0])
    out = []
    for i in range(num_scales):
        stacked = torch.cat([maps[i] for maps in per_sample], dim=0)
        means = stacked.mean(dim=(0, 2, 3))
        out.append({m: float(v) for m, v in zip(modalities, means)})
    return out


# --------------------------------------------------------------------------
# Complexity accounting
# --------------------------------------------------------------------------


def _encoder_counts(config: ModelConfig, grids: list[tuple[int, int]]) -> tuple[int, int]:
    enc = config.encoder
    params = 0
    flops = 0
    c_prev = enc.in_channels
    for (gh, gw), c_out, stride in zip(grids, enc.stage_channels, STAGE_STRIDES):
        p = gh * gw
        k = 2 * stride - 1
        params += c_prev * k * k + c_prev  # strided depthwise + bias
        params += c_prev * c_out + c_out  # pointwise
        flops += p * c_prev * k * k + p * c_prev * c_out
        e = enc.expansion
        for _ in range(enc.blocks_per_stage):
            params += 2 * c_out  # group norm affine
            params += c_out * 9 + c_out  # depthwise 3x3
            params += c_out * e * c_out + e * c_out  # expand
            params += e * c_out * c_out + c_out  # project
            flops += p * (9 * c_out + 2 * e * c_out * c_out)
        c_prev = c_out
    return params, flops


def _fusion_counts(
    config: ModelConfig, grids: list[tuple[int, int]], num_modalities: int
) -> tuple[int, dict[str, int]]:
    k_cls = config.num_classes
    m = num_modalities
    kernels = config.sgf.mp_kernels
    params = 0
    flops = {
        "mp": 0,
        "csf": 0,
        "prototypes": 0,
        "sp_query": 0,
        "sp_kv": 0,
        "sp_logits": 0,
        "sp_values": 0,
        "sp_out": 0,
        "rp_query": 0,
        "rp_kv": 0,
        "rp_logits": 0,
        "rp_values": 0,
        "rp_out": 0,
    }
    for (gh, gw), c in zip(grids, config.encoder.stage_channels):
        p = gh * gw
        params += m * (sum(kk * kk * c + c for kk in kernels) + c * c + c)  # MP stacks
        params += c * k_cls + k_cls  # CSF
        params += 2 * 4 * (c * c + c)  # SP and RP q/k/v/out projections
        flops["mp"] += m * p * c * (sum(kk * kk for kk in kernels) + c)
        flops["csf"] += m * p * c * k_cls
        flops["prototypes"] += m * p * k_cls * c
        flops["sp_query"] += k_cls * c * c
        flops["sp_kv"] += 2 * m * p * c * c
        flops["sp_logits"] += p * k_cls * m * c
        flops["sp_values"] += p * k_cls * m * c
        flops["sp_out"] += p * c * c
        flops["rp_query"] += p * c * c
        flops["rp_kv"] += 2 * m * p * c * c
        flops["rp_logits"] += p * m * c
        flops["rp_values"] += p * m * c
        flops["rp_out"] += p * c * c
    flops["total"] = sum(v for k, v in flops.items() if k != "total")
    # every term in these subtotals is exactly proportional to M or to K
    flops["modality_scaling"] = (
        flops["mp"]
        + flops["csf"]
        + flops["prototypes"]
        + flops["sp_kv"]
        + flops["sp_logits"]
        + flops["sp_values"]
        + flops["rp_kv"]
        + flops["rp_logits"]
        + flops["rp_values"]
    )
    flops["class_scaling"] = (
        flops["csf"]
        + flops["prototypes"]
        + flops["sp_query"]
        + flops["sp_logits"]
        + flops["sp_values"]
    )
    return params, flops


def _sampling_counts(config: ModelConfig, grids: list[tuple[int, int]]) -> dict[str, int]:
    """Singleton fusion replay: the same pipeline with one modality."""
    _, flops = _fusion_counts(config, grids, num_modalities=1)
    return {"total": flops["total"]}


def _head_counts(config: ModelConfig, grids: list[tuple[int, int]]) -> tuple[int, int]:
    e = config.head.embed_width
    k_cls = config.num_classes
    params = sum(c * e + e for c in config.encoder.stage_channels)
    params += len(grids) * e * e + e  # mix over concatenated scales
    params += e * k_cls + k_cls
    p1 = grids[0][0] * grids[0][1]
    flops = sum(gh * gw * c * e for (gh, gw), c in zip(grids, config.encoder.stage_channels))
    flops += p1 * len(grids) * e * e
    flops += p1 * e * k_cls
    return params, flops


def complexity_report(
    config: ModelConfig, image_size: tuple[int, int] = (512, 512)
) -> dict:
    """Closed-form parameter and FLOP counts for one multimodal sample.

    Parameter counts depend only on layer dimensions, never on image size.
    Encoder FLOPs cover all modalities (the shared encoder runs once per
    modality); fusion and sampling-replay FLOPs are reported separately.
    """
    h, w = image_size
    if h % 32 or w % 32:
        raise ValueError(f"input size {h}x{w} must be divisible by 32")
    grids = config.encoder.grid_sizes(h, w)
    m = len(config.modalities)

    enc_params, enc_flops_single = _encoder_counts(config, grids)
    sgf_params, sgf_flops = _fusion_counts(config, grids, m)
    head_params, head_flops = _head_counts(config, grids)
    mas_flops = _sampling_counts(config, grids)

    report = {
        "input_size": [h, w],
        "modalities": m,
        "num_classes": config.num_classes,
        "flop_convention": "weight-matrix multiply-accumulates; bias/norm/softmax excluded",
        "encoder": {"params": enc_params, "flops": m * enc_flops_single},
        "sgf": {"params": sgf_params, "flops": sgf_flops},
        "mas": {"params": 0, "flops": mas_flops},
        "head": {"params": head_params, "flops": head_flops},
    }
    report["total"] = {
        "params": enc_params + sgf_params + head_params,
        "flops": report["encoder"]["flops"]
        + sgf_flops["total"]
        + mas_flops["total"]
        + head_flops,
    }
    return report


# --------------------------------------------------------------------------
# Report container and collection
# --------------------------------------------------------------------------


@dataclass
class DiagnosticsReport:
    modalities: tuple[str, ...]
    robustness: list[dict[str, float]]  # per scale
    variance: list[dict[int, float]]  # per scale, class -> mean variance
    complexity: dict
    silhouette: dict[str, float] | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "modalities": list(self.modalities),
            "robustness": self.robustness,
            "variance": [{str(k): v for k, v in scale.items()} for scale in self.variance],
            "complexity": self.complexity,
            "silhouette": self.silhouette,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DiagnosticsReport":
        return cls(
            modalities=tuple(payload["modalities"]),
            robustness=[
                {m: float(v) for m, v in scale.items()} for scale in payload["robustness"]
            ],
            variance=[
                {int(k): float(v) for k, v in scale.items()} for scale in payload["variance"]
            ],
            complexity=payload["complexity"],
            silhouette=payload.get("silhouette"),
            extra=payload.get("extra", {}),
        )

    def save_json(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load_json(cls, path: Path | str) -> "DiagnosticsReport":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["kind", "scale", "key", "value"])
        for i, scale in enumerate(self.robustness):
            for m, v in scale.items():
                writer.writerow(["robustness", i, m, f"{v:.6f}"])
        for i, scale in enumerate(self.variance):
            for k, v in scale.items():
                writer.writerow(["variance", i, k, f"{v:.6f}"])
        if self.silhouette:
            for m, v in self.silhouette.items():
                writer.writerow(["silhouette", "", m, f"{v:.6f}"])
        return buf.getvalue()

    def save_csv(self, path: Path | str) -> None:
        Path(path).write_text(self.to_csv())


def collect_diagnostics(
    model: MultimodalSegmenter,
    bundles,
    ignore_index: int = 255,
    variant: str = "c",
    silhouette: bool = False,
    silhouette_scale: int = 1,
    silhouette_cap: int = 2000,
) -> DiagnosticsReport:
    """Run the model over labeled bundles and summarize its internals.

    Robustness requires attention fusion and is reported empty for the
    additive variant. The silhouette probe is optional: it scores how well
    per-modality semantic features cluster by class, one mean-pooled point
    per (sample, class), capped at ``silhouette_cap`` points.
    """
    if not bundles:
        raise ValueError("no bundles to diagnose")
    was_training = model.training
    model.eval()
    robust_maps: list[list[torch.Tensor]] = []
    variance_acc: list[dict[int, list[float]]] = []
    sil_points: dict[str, list[np.ndarray]] = {m: [] for m in bundles[0].modalities}
    sil_labels: dict[str, list[int]] = {m: [] for m in bundles[0].modalities}

    try:
        with torch.no_grad():
            for bundle in bundles:
                images, _ = collate_bundles([bundle])
                out = model(images, variant=variant)
                if out.fusion is not None:
                    robust_maps.append(out.fusion.robustness)
                if not variance_acc:
                    variance_acc = [dict() for _ in out.fused]
                for i, fused in enumerate(out.fused):
                    feats = fused[0].permute(1, 2, 0)
                    scores = intra_class_variance(feats, bundle.labels, ignore_index)
                    for k, v in scores.items():
                        variance_acc[i].setdefault(k, []).append(v)
                if silhouette and out.fusion is not None:
                    grid = out.fused[silhouette_scale].shape[-2:]
                    grid_labels = downsample_labels(bundle.labels, tuple(grid)).reshape(-1)
                    for m in out.fusion.modalities:
                        sem = out.fusion.semantics[m][silhouette_scale][0]
                        flat = sem.permute(1, 2, 0).reshape(-1, sem.shape[0]).cpu().numpy()
                        for k in np.unique(grid_labels):
                            if k == ignore_index:
                                continue
                            members = flat[grid_labels == k]
                            if len(members) == 0:
                                continue
                            sil_points[m].append(members.mean(axis=0))
                            sil_labels[m].append(int(k))
    finally:
        model.train(was_training)

    robustness = (
        robustness_scalars(robust_maps, bundles[0].modalities) if robust_maps else []
    )
    variance = [
        {k: float(np.mean(vs)) for k, vs in sorted(scale.items())} for scale in variance_acc
    ]

    sil_scores: dict[str, float] | None = None
    if silhouette:
        from sklearn.metrics import silhouette_score

        sil_scores = {}
        rng = np.random.default_rng(0)
        for m, points in sil_points.items():
            if not points:
                continue
            x = np.stack(points)
            y = np.asarray(sil_labels[m])
            if len(x) > silhouette_cap:
                pick = rng.choice(len(x), size=silhouette_cap, replace=False)
                x, y = x[pick], y[pick]
            if len(np.unique(y)) < 2 or len(x) < 3:
                continue
            sil_scores[m] = float(silhouette_score(x, y))

    config = model.config
    h, w = bundles[0].spatial_shape
    return DiagnosticsReport(
        modalities=tuple(bundles[0].modalities),
        robustness=robustness,
        variance=variance,
        complexity=complexity_report(config, (h, w)),
        silhouette=sil_scores,
    )
