"""Semantic-guided fusion: prototype-routed cross-attention over modalities.

At each encoder scale the fusion pipeline is

1. ``project``: a per-modality depthwise/pointwise projector (MP) maps raw
   encoder features into a shared semantic space.
2. ``filter_class``: a per-scale 1x1 conv (CSF), shared across modalities,
   compresses each semantic map to one channel per class.
3. ``build_prototypes``: class maps weight the semantic features into K
   global class prototypes via a matrix product over all modality pixels.
4. ``SpatialPerceptron`` (SP): at every pixel the K prototypes attend over
   the available modalities; averaging the K per-class results gives a
   semantic-aligned fused map f_se.
5. ``RobustnessPerceptron`` (RP): f_se itself attends over the modalities;
   its head-averaged attention weights are per-pixel modality robustness
   maps r (they sum to 1 over modalities), and the attended value is the
   final fused feature.

Because keys and values are per-modality tokens and every reduction over
the modality axis is order-free, outputs are invariant to modality
ordering and well defined for any non-empty subset.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from einops import rearrange
from torch import nn

from .encoder import FeaturePyramid

__all__ = [
    "SGFConfig",
    "ModalityProjector",
    "SpatialPerceptron",
    "RobustnessPerceptron",
    "SemanticGuidedFusion",
    "FusionScale",
    "FusionOutput",
    "build_prototypes",
]


@dataclass(frozen=True)
class SGFConfig:
    sp_heads: int = 8
    rp_heads: int = 4
    mp_kernels: tuple[int, ...] = (11, 7, 3)
    prototype_norm: str = "none"  # or "softmax" over all modality pixels per class

    def __post_init__(self) -> None:
        if self.sp_heads < 1 or self.rp_heads < 1:
            raise ValueError("attention needs at least one head")
        if any(k < 1 or k % 2 == 0 for k in self.mp_kernels):
            raise ValueError(f"projector kernels must be odd and positive: {self.mp_kernels}")
        if self.prototype_norm not in ("none", "softmax"):
            raise ValueError(f"unknown prototype_norm '{self.prototype_norm}'")


class ModalityProjector(nn.Module):
    """Depthwise conv stack plus a pointwise mix, one instance per modality and scale."""

    def __init__(self, channels: int, kernels: tuple[int, ...] = (11, 7, 3)):
        super().__init__()
        # padding k // 2 keeps H x W only for odd k
        bad = [k for k in kernels if k < 1 or k % 2 == 0]
        if bad:
            raise ValueError(f"kernel sizes must be odd and positive, got {bad}")
        self.spatial = nn.Sequential(
            *[
                nn.Conv2d(channels, channels, k, padding=k // 2, groups=channels)
                for k in kernels
            ]
        )
        self.mix = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mix(self.spatial(x))


def build_prototypes(
    class_maps: torch.Tensor, semantics: torch.Tensor, norm: str = "none"
) -> torch.Tensor:
    """Aggregate per-class global prototypes over all modalities and pixels.

    Args:
        class_maps: (B, M, K, H, W) class responses.
        semantics: (B, M, C, H, W) semantic features.
        norm: "none" takes the raw weighted sum; "softmax" first normalizes
            each class's responses over the concatenated modality-pixel axis
            so prototypes become convex combinations.

    Returns:
        (B, K, C) prototype matrix.
    """
    if class_maps.shape[:2] != semantics.shape[:2] or class_maps.shape[-2:] != semantics.shape[-2:]:
        raise ValueError(
            f"class maps {tuple(class_maps.shape)} and semantics {tuple(semantics.shape)} disagree"
        )
    if norm == "softmax":
        flat = rearrange(class_maps, "b m k h w -> b k (m h w)")
        flat = flat.softmax(dim=-1)
        class_maps = rearrange(
            flat, "b k (m h w) -> b m k h w", m=class_maps.shape[1], h=class_maps.shape[3]
        )
    elif norm != "none":
        raise ValueError(f"unknown prototype norm '{norm}'")
    return torch.einsum("bmkhw,bmchw->bkc", class_maps, semantics)


def _split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    """(..., h*d) -> (..., h, d)."""
    return rearrange(x, "... (n d) -> ... n d", n=heads)


class SpatialPerceptron(nn.Module):
    """Class prototypes attend over modality tokens at every pixel.

    Queries are the K prototypes (shared by all pixels), keys and values are
    the M per-modality semantic features at each pixel. The K per-class
    attended results are averaged into a single fused map.
    """

    def __init__(self, channels: int, heads: int = 8):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(channels // heads)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(
        self,
        prototypes: torch.Tensor,
        features: torch.Tensor,
        return_activations: bool = False,
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Fuse (B, M, C, H, W) features under (B, K, C) prototypes.

        Returns ``(f_se, a_se)`` where f_se is (B, C, H, W) and a_se, the
        per-class activations with f_se == a_se.mean(class axis), is
        (B, K, C, H, W) when requested and ``None`` otherwise.
        """
        _, _, _, height, _ = features.shape
        q = _split_heads(self.to_q(prototypes), self.heads)  # b k n d
        tokens = rearrange(features, "b m c ih iw -> b (ih iw) m c")
        k = rearrange(self.to_k(tokens), "b p m (n d) -> b p n m d", n=self.heads)
        v = rearrange(self.to_v(tokens), "b p m (n d) -> b p n m d", n=self.heads)
        logits = torch.einsum("bknd,bpnmd->bpnkm", q, k) * self.scale
        attn = logits.softmax(dim=-1)
        context = torch.einsum("bpnkm,bpnmd->bpnkd", attn, v)
        if return_activations:
            per_class = self.to_out(rearrange(context, "b p n k d -> b p k (n d)"))
            fused = per_class.mean(dim=2)
            a_se = rearrange(per_class, "b (ih iw) k c -> b k c ih iw", ih=height)
        else:
            pooled = rearrange(context.mean(dim=3), "b p n d -> b p (n d)")
            fused = self.to_out(pooled)
            a_se = None
        f_se = rearrange(fused, "b (ih iw) c -> b c ih iw", ih=height)
        return f_se, a_se


class RobustnessPerceptron(nn.Module):
    """The fused map attends over modalities; attention weights are robustness.

    A single query per pixel (the semantic-aligned fused feature) attends
    over the M modality tokens. Head-averaged attention weights form the
    per-pixel modality robustness maps, which sum to 1 over modalities by
    softmax construction.
    """

    def __init__(self, channels: int, heads: int = 4):
        super().__init__()
        if channels % heads:
            raise ValueError(f"channels {channels} not divisible by {heads} heads")
        self.heads = heads
        self.scale = 1.0 / math.sqrt(channels // heads)
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(
        self, f_se: torch.Tensor, features: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns ``(fused, robustness)``: (B, C, H, W) and (B, M, H, W)."""
        _, _, _, height, _ = features.shape
        pixels = rearrange(f_se, "b c ih iw -> b (ih iw) c")
        q = _split_heads(self.to_q(pixels), self.heads)  # b p n d
        tokens = rearrange(features, "b m c ih iw -> b (ih iw) m c")
        k = rearrange(self.to_k(tokens), "b p m (n d) -> b p n m d", n=self.heads)
        v = rearrange(self.to_v(tokens), "b p m (n d) -> b p n m d", n=self.heads)
        logits = torch.einsum("bpnd,bpnmd->bpnm", q, k) * self.scale
        attn = logits.softmax(dim=-1)
        robustness = rearrange(attn.mean(dim=2), "b (ih iw) m -> b m ih iw", ih=height)
        context = torch.einsum("bpnm,bpnmd->bpnd", attn, v)
        fused = self.to_out(rearrange(context, "b p n d -> b p (n d)"))
        return rearrange(fused, "b (ih iw) c -> b c ih iw", ih=height), robustness


@dataclass
class FusionScale:
    """Everything the fusion pipeline produced at one scale."""

    fused: torch.Tensor  # (B, C, H, W)
    robustness: torch.Tensor  # (B, M, H, W)
    prototypes: torch.Tensor  # (B, K, C)
    spatial: torch.Tensor  # (B, C, H, W) prototype-routed map f_se
    class_maps: torch.Tensor | None = None  # (B, M, K, H, W), diagnostics only
    activations: torch.Tensor | None = None  # (B, K, C, H, W), diagnostics only


@dataclass
class FusionOutput:
    """Per-scale fusion results plus the semantics MP produced along the way."""

    modalities: list[str]
    scales: list[FusionScale]
    semantics: dict[str, list[torch.Tensor]]

    @property
    def fused(self) -> list[torch.Tensor]:
        return [s.fused for s in self.scales]

    @property
    def robustness(self) -> list[torch.Tensor]:
        return [s.robustness for s in self.scales]


class SemanticGuidedFusion(nn.Module):
    """Fusion over a declared modality vocabulary at four encoder scales."""

    def __init__(
        self,
        modalities: list[str],
        stage_channels: tuple[int, ...],
        num_classes: int,
        config: SGFConfig | None = None,
    ):
        super().__init__()
        if num_classes < 2:
            raise ValueError("fusion needs at least two classes")
        self.config = config or SGFConfig()
        self.modalities = list(modalities)
        self.num_classes = num_classes
        self.stage_channels = tuple(stage_channels)
        self.mp = nn.ModuleDict(
            {
                m: nn.ModuleList(
                    [ModalityProjector(c, self.config.mp_kernels) for c in stage_channels]
                )
                for m in self.modalities
            }
        )
        self.csf = nn.ModuleList([nn.Conv2d(c, num_classes, 1) for c in stage_channels])
        self.sp = nn.ModuleList(
            [SpatialPerceptron(c, self.config.sp_heads) for c in stage_channels]
        )
        self.rp = nn.ModuleList(
            [RobustnessPerceptron(c, self.config.rp_heads) for c in stage_channels]
        )

    # ---- stage operations -------------------------------------------------

    def project(self, scale: int, modality: str, features: torch.Tensor) -> torch.Tensor:
        """MP: map one modality's raw features into the shared semantic space."""
        if modality not in self.mp:
            raise ValueError(
                f"no projector for modality '{modality}' (model knows {self.modalities})"
            )
        return self.mp[modality][scale](features)

    def filter_class(self, scale: int, semantics: torch.Tensor) -> torch.Tensor:
        """CSF: compress (B, C, H, W) semantics to (B, K, H, W) class responses."""
        return self.csf[scale](semantics)

    def fuse_semantics(
        self, scale: int, semantics: dict[str, torch.Tensor], diagnostics: bool = False
    ) -> FusionScale:
        """Run CSF, prototype aggregation, SP and RP on projected semantics.

        This is the shared tail of full fusion and single-modality replay;
        both paths call it so a singleton input reproduces full fusion on
        that modality bit for bit.
        """
        if not semantics:
            raise ValueError("fusion needs at least one modality")
        stack = torch.stack(list(semantics.values()), dim=1)  # (B, M, C, H, W)
        class_maps = torch.stack(
            [self.filter_class(scale, s) for s in semantics.values()], dim=1
        )
        prototypes = build_prototypes(class_maps, stack, self.config.prototype_norm)
        f_se, a_se = self.sp[scale](prototypes, stack, return_activations=diagnostics)
        fused, robustness = self.rp[scale](f_se, stack)
        return FusionScale(
            fused=fused,
            robustness=robustness,
            prototypes=prototypes,
            spatial=f_se,
            class_maps=class_maps if diagnostics else None,
            activations=a_se,
        )

    # ---- full forward -----------------------------------------------------

    def forward(
        self,
        pyramid: FeaturePyramid,
        subset: set[str] | list[str] | None = None,
        diagnostics: bool = False,
    ) -> FusionOutput:
        """Fuse a feature pyramid, optionally restricted to a modality subset.

        The modality order of the pyramid is preserved; robustness maps are
        indexed in that order.
        """
        order = pyramid.modalities
        if subset is not None:
            wanted = set(subset)
            missing = sorted(wanted - set(order))
            if missing:
                raise ValueError(f"pyramid does not carry modalities {missing}")
            order = [m for m in order if m in wanted]
        if not order:
            raise ValueError("fusion needs at least one modality")

        semantics: dict[str, list[torch.Tensor]] = {
            m: [
                self.project(i, m, pyramid.features[m][i])
                for i in range(len(self.stage_channels))
            ]
            for m in order
        }
        scales = [
            self.fuse_semantics(i, {m: semantics[m][i] for m in order}, diagnostics)
            for i in range(len(self.stage_channels))
        ]
        return FusionOutput(modalities=order, scales=scales, semantics=semantics)
