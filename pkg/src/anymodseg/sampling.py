"""Robustness-guided modality sampling, the training-only regularizer.

The fusion pipeline's robustness maps say which modality dominates each
pixel. Inverting them (pixelwise reciprocal, renormalized over modalities)
turns "most trusted" into "least practiced": per scale, a modality is drawn
with probability proportional to how much the fused features currently
ignore it, and fusion is replayed on that single modality so its solo
predictions receive supervision too.

If robustness came from a softmax over logits z, the exact inversion
identity holds: invert(softmax(z)) == softmax(-z).

All randomness flows through an explicit ``torch.Generator`` owned by the
caller; nothing here touches global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .fusion import FusionScale, SemanticGuidedFusion

__all__ = [
    "SamplingDistribution",
    "invert_robustness",
    "pool_probabilities",
    "sample_modality",
    "mas_forward",
]


@dataclass(frozen=True)
class SamplingDistribution:
    """A categorical distribution over named modalities at one scale."""

    probs: torch.Tensor  # (M,)
    modalities: tuple[str, ...]

    def __post_init__(self) -> None:
        if self.probs.ndim != 1 or self.probs.shape[0] != len(self.modalities):
            raise ValueError(
                f"{tuple(self.probs.shape)} probabilities for {len(self.modalities)} modalities"
            )
        if (self.probs < 0).any():
            raise ValueError("sampling probabilities must be nonnegative")
        total = float(self.probs.sum())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"sampling probabilities sum to {total}, expected 1")


def invert_robustness(robustness: torch.Tensor, eps: float = 1e-8) -> torch.Tensor:
    """Reciprocal of each modality's robustness, renormalized per pixel.

    ``robustness`` carries modalities on axis -3 (shape (..., M, H, W)) and
    sums to 1 over that axis. The clamp at ``eps`` keeps the reciprocal
    finite when a modality's share underflows.
    """
    if robustness.ndim < 3:
        raise ValueError(f"expected (..., M, H, W) robustness, got shape {tuple(robustness.shape)}")
    inverse = 1.0 / robustness.clamp_min(eps)
    return inverse / inverse.sum(dim=-3, keepdim=True)


def pool_probabilities(
    inverted: torch.Tensor, modalities: list[str] | tuple[str, ...]
) -> SamplingDistribution:
    """Average the inverted maps over all pixels (and batch) per modality.

    Means of per-pixel distributions again sum to 1, giving the scale's
    sampling distribution.
    """
    if inverted.ndim == 3:
        inverted = inverted[None]
    if inverted.ndim != 4 or inverted.shape[1] != len(modalities):
        raise ValueError(
            f"expected (B, {len(modalities)}, H, W) inverted maps, got {tuple(inverted.shape)}"
        )
    probs = inverted.mean(dim=(0, 2, 3))
    return SamplingDistribution(probs.detach(), tuple(modalities))


def sample_modality(dist: SamplingDistribution, generator: torch.Generator) -> str:
    """Draw one modality id by inverse-CDF sampling from ``generator``."""
    u = torch.rand((), generator=generator, dtype=torch.float64)
    edges = torch.cumsum(dist.probs.double(), dim=0)
    index = int(torch.searchsorted(edges, u, right=True))
    index = min(index, len(dist.modalities) - 1)  # cumsum may top out below 1.0
    return dist.modalities[index]


def mas_forward(
    semantics: dict[str, torch.Tensor],
    robustness: torch.Tensor,
    sgf: SemanticGuidedFusion,
    scale: int,
    generator: torch.Generator,
    eps: float = 1e-8,
) -> tuple[FusionScale, str]:
    """Sample one modality at this scale and replay fusion on it alone.

    ``semantics`` are the projected (post-MP) per-modality features the full
    fusion pass already produced at ``scale``; ``robustness`` is that pass's
    (B, M, H, W) map in the same modality order. Uses the same fusion
    parameters, so the replayed output matches a singleton fusion call on
    the sampled modality exactly.

    Only callable in training mode: sampling exists to shape gradients, and
    silently sampling at inference would make predictions nondeterministic.
    """
    if not sgf.training:
        raise RuntimeError("modality sampling is a training-only path; model is in eval mode")
    order = list(semantics)
    if robustness.shape[-3] != len(order):
        raise ValueError(
            f"robustness carries {robustness.shape[-3]} modalities, semantics carry {len(order)}"
        )
    dist = pool_probabilities(invert_robustness(robustness, eps), order)
    picked = sample_modality(dist, generator)
    replay = sgf.fuse_semantics(scale, {picked: semantics[picked]})
    return replay, picked
