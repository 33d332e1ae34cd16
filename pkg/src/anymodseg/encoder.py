"""Shared-weight hierarchical encoder applied independently to each modality.

Four stages with strides (4, 2, 2, 2) produce feature maps at 1/4, 1/8,
1/16 and 1/32 of the input resolution. One parameter set serves every
modality; a packed forward runs all modalities of a batch through the
encoder as one tensor and must agree bit for bit with per-modality calls.
That contract is why every layer here is depthwise or pointwise: dense
k x k convolutions are not batch-size invariant under common CPU backends,
separable ones are.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import ModalityBundle

__all__ = ["EncoderConfig", "SharedEncoder", "FeaturePyramid", "adapt_channels", "extract_features", "collate_bundles"]

STAGE_STRIDES = (4, 2, 2, 2)
TOTAL_STRIDE = 32


@dataclass(frozen=True)
class EncoderConfig:
    stage_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    in_channels: int = 3
    blocks_per_stage: int = 2
    expansion: int = 2

    def __post_init__(self) -> None:
        if len(self.stage_channels) != 4:
            raise ValueError(f"expected 4 stage widths, got {self.stage_channels}")
        if any(c <= 0 for c in self.stage_channels):
            raise ValueError(f"stage widths must be positive: {self.stage_channels}")
        if list(self.stage_channels) != sorted(self.stage_channels):
            raise ValueError(f"stage widths must be nondecreasing: {self.stage_channels}")

    def grid_sizes(self, height: int, width: int) -> list[tuple[int, int]]:
        """Feature-map shapes per scale for an input of the given size."""
        sizes = []
        h, w = height, width
        for s in STAGE_STRIDES:
            h, w = h // s, w // s
            sizes.append((h, w))
        return sizes


class _Downsample(nn.Module):
    """Strided depthwise conv followed by a pointwise channel change."""

    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        kernel = 2 * stride - 1
        self.spatial = nn.Conv2d(
            c_in, c_in, kernel, stride=stride, padding=(kernel - stride + 1) // 2, groups=c_in
        )
        self.project = nn.Conv2d(c_in, c_out, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(self.spatial(x))


class _ResidualBlock(nn.Module):
    """Pre-normalized depthwise/pointwise block: x + proj(gelu(expand(dw(norm(x)))))."""

    def __init__(self, channels: int, expansion: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, channels)
        self.spatial = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.expand = nn.Conv2d(channels, expansion * channels, 1)
        self.act = nn.GELU()
        self.project = nn.Conv2d(expansion * channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.project(self.act(self.expand(self.spatial(self.norm(x)))))


class SharedEncoder(nn.Module):
    """Maps a (B, 3, H, W) image batch to four feature scales."""

    def __init__(self, config: EncoderConfig | None = None):
        super().__init__()
        self.config = config or EncoderConfig()
        stages = []
        c_prev = self.config.in_channels
        for c_out, stride in zip(self.config.stage_channels, STAGE_STRIDES):
            layers: list[nn.Module] = [_Downsample(c_prev, c_out, stride)]
            layers += [
                _ResidualBlock(c_out, self.config.expansion)
                for _ in range(self.config.blocks_per_stage)
            ]
            stages.append(nn.Sequential(*layers))
            c_prev = c_out
        self.stages = nn.ModuleList(stages)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        if x.ndim != 4:
            raise ValueError(f"expected (B, C, H, W) input, got shape {tuple(x.shape)}")
        _, _, h, w = x.shape
        if h % TOTAL_STRIDE or w % TOTAL_STRIDE:
            raise ValueError(f"input size {h}x{w} must be divisible by {TOTAL_STRIDE}")
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


def adapt_channels(pixels: torch.Tensor, wanted: int) -> torch.Tensor:
    """Make a (B, ch, H, W) tensor match the encoder's input width.

    Single-channel modalities are replicated across channels; matching
    inputs pass through; anything else is a hard error rather than a
    silent projection.
    """
    ch = pixels.shape[1]
    if ch == wanted:
        return pixels
    if ch == 1:
        return pixels.expand(-1, wanted, -1, -1)
    raise ValueError(f"cannot adapt {ch}-channel input to {wanted} encoder channels")


@dataclass
class FeaturePyramid:
    """Per-modality multi-scale features, modality order preserved.

    ``features[m][i]`` has shape (B, C_i, H_i, W_i).
    """

    modalities: list[str]
    features: dict[str, list[torch.Tensor]]

    def __post_init__(self) -> None:
        if list(self.features) != self.modalities:
            raise ValueError("feature dict order disagrees with the modality list")

    @property
    def num_scales(self) -> int:
        return len(next(iter(self.features.values())))

    def stacked(self, scale: int) -> torch.Tensor:
        """Stack modalities at one scale into (B, M, C_i, H_i, W_i)."""
        return torch.stack([self.features[m][scale] for m in self.modalities], dim=1)

    def subset(self, keep: list[str]) -> "FeaturePyramid":
        missing = [m for m in keep if m not in self.features]
        if missing:
            raise ValueError(f"pyramid has no modalities {missing}")
        return FeaturePyramid(list(keep), {m: self.features[m] for m in keep})


def collate_bundles(
    bundles: list[ModalityBundle], device: torch.device | str = "cpu"
) -> tuple[dict[str, torch.Tensor], torch.Tensor | None]:
    """Stack bundles sharing a modality set into per-modality batch tensors.

    Returns ``(images, labels)`` with images as (B, ch, H, W) float tensors
    in the first bundle's modality order and labels as (B, H, W) int64 or
    ``None`` when any bundle is unlabeled.
    """
    order = bundles[0].modalities
    for b in bundles:
        if b.modalities != order:
            raise ValueError(
                f"cannot collate: sample '{b.sample_id}' has modalities {b.modalities}, "
                f"expected {order}"
            )
    images = {}
    for name in order:
        stacked = np.stack([b.images[name].pixels for b in bundles], axis=0)
        images[name] = torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous().float().to(device)
    labels = None
    if all(b.labels is not None for b in bundles):
        stacked = np.stack([b.labels for b in bundles], axis=0)
        labels = torch.from_numpy(stacked).long().to(device)
    return images, labels


def extract_features(
    source: ModalityBundle | dict[str, torch.Tensor],
    encoder: SharedEncoder,
    subset: set[str] | list[str] | None = None,
) -> FeaturePyramid:
    """Run the shared encoder over every requested modality.

    All modalities are packed into one batch along the sample axis for a
    single encoder call; because the encoder is built from batch-invariant
    layers this is bitwise identical to encoding each modality separately.
    """
    if isinstance(source, ModalityBundle):
        images, _ = collate_bundles([source])
    else:
        images = source
    order = [m for m in images if subset is None or m in set(subset)]
    if subset is not None and len(order) != len(set(subset)):
        missing = sorted(set(subset) - set(images))
        raise ValueError(f"requested modalities {missing} are not in the input")
    if not order:
        raise ValueError("at least one modality is required")

    wanted = encoder.config.in_channels
    adapted = [adapt_channels(images[m], wanted) for m in order]
    batch = adapted[0].shape[0]
    packed = torch.cat(adapted, dim=0)
    scales = encoder(packed)
    features: dict[str, list[torch.Tensor]] = {m: [] for m in order}
    for scale in scales:
        chunks = scale.split(batch, dim=0)
        for m, chunk in zip(order, chunks):
            features[m].append(chunk)
    return FeaturePyramid(order, features)
