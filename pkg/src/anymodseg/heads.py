"""All-linear segmentation head and the masked training losses.

The head projects each scale to a common embedding width, resamples
everything to the finest (1/4) grid, concatenates, mixes with a 1x1 conv,
classifies, and bilinearly upsamples to full resolution. Keeping it linear
(no activations, only 1x1 convs and interpolation) makes it cheap, easy to
reason about, and batch-packing safe: fused feature sets from different
branches can share one head call with bitwise-identical results.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

__all__ = ["HeadConfig", "SegHead", "masked_cross_entropy", "combined_loss", "LossValues"]


@dataclass(frozen=True)
class HeadConfig:
    embed_width: int = 64

    def __post_init__(self) -> None:
        if self.embed_width < 1:
            raise ValueError("embed_width must be positive")


class SegHead(nn.Module):
    """Fuse four feature scales into full-resolution class logits."""

    def __init__(
        self,
        stage_channels: tuple[int, ...],
        num_classes: int,
        config: HeadConfig | None = None,
    ):
        super().__init__()
        if num_classes < 2:
            raise ValueError("head needs at least two classes")
        self.config = config or HeadConfig()
        self.stage_channels = tuple(stage_channels)
        self.num_classes = num_classes
        width = self.config.embed_width
        self.proj = nn.ModuleList([nn.Conv2d(c, width, 1) for c in stage_channels])
        self.mix = nn.Conv2d(width * len(stage_channels), width, 1)
        self.classify = nn.Conv2d(width, num_classes, 1)

    def forward(self, features: list[torch.Tensor]) -> torch.Tensor:
        """Map per-scale (B, C_i, H_i, W_i) features to (B, K, H, W) logits.

        H and W are 4x the finest feature grid, matching the encoder's
        stride-4 first stage.
        """
        if len(features) != len(self.proj):
            raise ValueError(f"expected {len(self.proj)} scales, got {len(features)}")
        for feat, c in zip(features, self.stage_channels):
            if feat.shape[1] != c:
                raise ValueError(
                    f"feature channels {[int(f.shape[1]) for f in features]} do not match "
                    f"head widths {self.stage_channels}"
                )
        target = features[0].shape[-2:]
        resampled = []
        for proj, feat in zip(self.proj, features):
            x = proj(feat)
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            resampled.append(x)
        logits = self.classify(self.mix(torch.cat(resampled, dim=1)))
        return F.interpolate(logits, scale_factor=4, mode="bilinear", align_corners=False)


def masked_cross_entropy(
    logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = 255
) -> torch.Tensor:
    """Mean cross-entropy over pixels whose label is not ``ignore_index``.

    Raises if every pixel is ignored; averaging over nothing would silently
    produce NaN and poison the training run.
    """
    if logits.shape[0] != labels.shape[0] or logits.shape[-2:] != labels.shape[-2:]:
        raise ValueError(
            f"logits {tuple(logits.shape)} and labels {tuple(labels.shape)} do not align"
        )
    if int((labels != ignore_index).sum()) == 0:
        raise ValueError("all pixels are ignored; loss is undefined")
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


@dataclass
class LossValues:
    """The two branch losses and their weighted total for one step."""

    fusion: float
    sampling: float | None
    total: float


def combined_loss(
    fusion_loss: torch.Tensor,
    sampling_loss: torch.Tensor | None,
    lambda_fusion: float = 2.0,
    lambda_sampling: float = 1.0,
) -> torch.Tensor:
    """Weighted sum of the fusion-branch and sampling-branch losses."""
    total = lambda_fusion * fusion_loss
    if sampling_loss is not None:
        total = total + lambda_sampling * sampling_loss
    return total
