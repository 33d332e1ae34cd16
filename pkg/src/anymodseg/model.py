"""The assembled segmenter: shared encoder, fusion, and head.

Three wiring variants support ablation:

- ``a``: fusion replaced by elementwise addition of the per-modality
  encoder features; no modality sampling.
- ``b``: attention fusion, no modality sampling.
- ``c``: attention fusion plus robustness-guided sampling during training.

All variants share the same parameter layout so checkpoints stay
interchangeable; a variant only selects which paths run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .data import ModalityBundle
from .encoder import EncoderConfig, FeaturePyramid, SharedEncoder, collate_bundles, extract_features
from .fusion import FusionOutput, SemanticGuidedFusion, SGFConfig
from .heads import HeadConfig, SegHead

__all__ = ["VARIANTS", "ModelConfig", "SegmenterOutput", "MultimodalSegmenter", "build_model"]

VARIANTS = ("a", "b", "c")


@dataclass(frozen=True)
class ModelConfig:
    modalities: tuple[str, ...]
    num_classes: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sgf: SGFConfig = field(default_factory=SGFConfig)
    head: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self) -> None:
        if len(self.modalities) < 1:
            raise ValueError("model needs at least one modality")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modality names: {self.modalities}")
        if self.num_classes < 2:
            raise ValueError("model needs at least two classes")


@dataclass
class SegmenterOutput:
    logits: torch.Tensor  # (B, K, H, W)
    pyramid: FeaturePyramid
    fusion: FusionOutput | None  # None under additive fusion (variant a)
    fused: list[torch.Tensor]


class MultimodalSegmenter(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = SharedEncoder(config.encoder)
        self.sgf = SemanticGuidedFusion(
            list(config.modalities),
            config.encoder.stage_channels,
            config.num_classes,
            config.sgf,
        )
        self.head = SegHead(config.encoder.stage_channels, config.num_classes, config.head)

    def features(
        self,
        images: dict[str, torch.Tensor] | ModalityBundle,
        subset: set[str] | list[str] | None = None,
    ) -> FeaturePyramid:
        return extract_features(images, self.encoder, subset)

    def fuse(
        self, pyramid: FeaturePyramid, variant: str = "c", diagnostics: bool = False
    ) -> tuple[list[torch.Tensor], FusionOutput | None]:
        """Combine per-modality features per the variant's fusion rule."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant '{variant}' (choose from {VARIANTS})")
        if variant == "a":
            fused = [
                torch.stack([pyramid.features[m][i] for m in pyramid.modalities], dim=0).sum(dim=0)
                for i in range(pyramid.num_scales)
            ]
            return fused, None
        fusion = self.sgf(pyramid, diagnostics=diagnostics)
        return fusion.fused, fusion

    def forward(
        self,
        images: dict[str, torch.Tensor] | ModalityBundle,
        subset: set[str] | list[str] | None = None,
        variant: str = "c",
        diagnostics: bool = False,
    ) -> SegmenterOutput:
        pyramid = self.features(images, subset)
        fused, fusion = self.fuse(pyramid, variant, diagnostics)
        logits = self.head(fused)
        return SegmenterOutput(logits=logits, pyramid=pyramid, fusion=fusion, fused=fused)


def build_model(config: ModelConfig, seed: int = 0) -> MultimodalSegmenter:
    """Construct a segmenter with initialization drawn from a private stream.

    Global RNG state is forked and restored, so building a model neither
    depends on nor disturbs ambient seeding.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = MultimodalSegmenter(config)
    return model


def predict_labels(
    model: MultimodalSegmenter,
    bundle: ModalityBundle,
    subset: set[str] | list[str] | None = None,
    variant: str = "c",
) -> torch.Tensor:
    """Argmax class map (H, W) for one bundle under no_grad and eval mode."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            images, _ = collate_bundles([bundle])
            out = model(images, subset=subset, variant=variant)
            return out.logits.argmax(dim=1)[0]
    finally:
        model.train(was_training)
