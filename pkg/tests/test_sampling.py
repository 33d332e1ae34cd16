"""Robustness inversion, categorical pooling, and single-modality replay."""

from __future__ import annotations

import time

import pytest
import torch

from anymodseg.fusion import SemanticGuidedFusion, SGFConfig
from anymodseg.sampling import (
    SamplingDistribution,
    invert_robustness,
    mas_forward,
    pool_probabilities,
    sample_modality,
)

from test_fusion import CHANNELS, random_pyramid, tiny_sgf


class TestInversion:
    def test_frozen_example(self):
        """r = (1/2, 1/4, 1/4) inverts to (1/5, 2/5, 2/5)."""
        r = torch.tensor([0.5, 0.25, 0.25]).view(3, 1, 1)
        got = invert_robustness(r).view(3)
        assert torch.allclose(got, torch.tensor([0.2, 0.4, 0.4]), atol=1e-7)

    def test_softmin_identity(self):
        """invert(softmax(z)) == softmax(-z) wherever the clamp is inactive."""
        g = torch.Generator().manual_seed(0)
        z = torch.randn(4, 6, 5, 5, generator=g, dtype=torch.float64)
        r = torch.softmax(z, dim=1)
        got = invert_robustness(r.movedim(1, -3))
        want = torch.softmax(-z, dim=1).movedim(1, -3)
        assert torch.allclose(got, want, atol=1e-12)

    def test_reverses_preference_order(self):
        """Inversion exactly flips the argsort of every pixel's distribution."""
        g = torch.Generator().manual_seed(1)
        n = 10_000
        r = torch.softmax(torch.randn(n, 5, 1, 1, generator=g, dtype=torch.float64), dim=1)
        r = r.movedim(1, -3)
        start = time.monotonic()
        inv = invert_robustness(r)
        elapsed = time.monotonic() - start
        fw = r.squeeze().argsort(dim=1)
        bw = inv.squeeze().argsort(dim=1, descending=True)
        assert torch.equal(fw, bw)
        assert elapsed < 10.0

    def test_sums_to_one(self):
        g = torch.Generator().manual_seed(2)
        r = torch.softmax(torch.randn(2, 4, 3, 3, generator=g), dim=1)
        inv = invert_robustness(r)
        assert torch.allclose(inv.sum(dim=1), torch.ones(2, 3, 3), atol=1e-6)

    def test_epsilon_guards_zero_share(self):
        r = torch.tensor([1.0, 0.0]).view(2, 1, 1)
        inv = invert_robustness(r, eps=1e-8)
        assert torch.isfinite(inv).all()
        # the starved modality takes essentially all the mass
        assert float(inv[1]) > 0.9999

    def test_rank_validated(self):
        with pytest.raises(ValueError, match="M, H, W"):
            invert_robustness(torch.ones(3, 4))


class TestDistribution:
    def test_pooling_means_per_modality(self):
        g = torch.Generator().manual_seed(3)
        inv = torch.softmax(torch.randn(2, 3, 4, 4, generator=g), dim=1)
        dist = pool_probabilities(inv, ["a", "b", "c"])
        assert torch.allclose(dist.probs, inv.mean(dim=(0, 2, 3)), atol=1e-7)
        assert abs(float(dist.probs.sum()) - 1.0) < 1e-6

    def test_pooling_detaches(self):
        inv = torch.softmax(torch.randn(1, 2, 2, 2, requires_grad=True), dim=1)
        assert not pool_probabilities(inv, ["a", "b"]).probs.requires_grad

    def test_pooling_validates_modality_count(self):
        with pytest.raises(ValueError, match="inverted maps"):
            pool_probabilities(torch.ones(1, 3, 2, 2) / 3, ["a", "b"])

    def test_distribution_validation(self):
        with pytest.raises(ValueError, match="nonnegative"):
            SamplingDistribution(torch.tensor([1.5, -0.5]), ("a", "b"))
        with pytest.raises(ValueError, match="sum to"):
            SamplingDistribution(torch.tensor([0.3, 0.3]), ("a", "b"))
        with pytest.raises(ValueError, match="modalities"):
            SamplingDistribution(torch.tensor([0.5, 0.5]), ("a", "b", "c"))

    def test_sampling_is_deterministic_per_stream(self):
        dist = SamplingDistribution(torch.tensor([0.2, 0.4, 0.4]), ("a", "b", "c"))
        draws1 = [sample_modality(dist, torch.Generator().manual_seed(7)) for _ in range(1)]
        g = torch.Generator().manual_seed(7)
        draws2 = [sample_modality(dist, g)]
        assert draws1 == draws2

    def test_sampling_frequencies_match_probabilities(self):
        dist = SamplingDistribution(torch.tensor([0.2, 0.4, 0.4]), ("a", "b", "c"))
        g = torch.Generator().manual_seed(11)
        counts = {"a": 0, "b": 0, "c": 0}
        n = 20_000
        for _ in range(n):
            counts[sample_modality(dist, g)] += 1
        assert abs(counts["a"] / n - 0.2) < 0.01
        assert abs(counts["b"] / n - 0.4) < 0.01

    def test_degenerate_distribution_always_picks_support(self):
        dist = SamplingDistribution(torch.tensor([0.0, 1.0, 0.0]), ("a", "b", "c"))
        g = torch.Generator().manual_seed(0)
        assert all(sample_modality(dist, g) == "b" for _ in range(50))


class TestReplay:
    def test_replay_matches_singleton_fusion_bitwise(self):
        """The sampled branch must equal a fresh singleton fusion exactly."""
        sgf = tiny_sgf(9).train()
        pyr = random_pyramid(9)
        out = sgf(pyr)
        g = torch.Generator().manual_seed(5)
        for i in range(4):
            sems = {m: out.semantics[m][i] for m in out.modalities}
            replay, picked = mas_forward(sems, out.scales[i].robustness, sgf, i, g)
            solo = sgf(pyr, subset={picked})
            assert torch.equal(replay.fused, solo.scales[i].fused)
            assert torch.equal(replay.prototypes, solo.scales[i].prototypes)
            assert torch.equal(replay.robustness, torch.ones_like(replay.robustness))

    def test_replay_draw_sequence_is_reproducible(self):
        sgf = tiny_sgf(10).train()
        pyr = random_pyramid(10)
        out = sgf(pyr)
        sems = {m: out.semantics[m][0] for m in out.modalities}

        def draws(seed):
            g = torch.Generator().manual_seed(seed)
            return [
                mas_forward(sems, out.scales[0].robustness, sgf, 0, g)[1] for _ in range(8)
            ]

        assert draws(3) == draws(3)

    def test_eval_mode_rejected(self):
        sgf = tiny_sgf(11).eval()
        pyr = random_pyramid(11)
        out = sgf(pyr)
        sems = {m: out.semantics[m][0] for m in out.modalities}
        with pytest.raises(RuntimeError, match="training-only"):
            mas_forward(sems, out.scales[0].robustness, sgf, 0, torch.Generator())

    def test_modality_count_mismatch_rejected(self):
        sgf = tiny_sgf(12).train()
        pyr = random_pyramid(12)
        out = sgf(pyr)
        sems = {m: out.semantics[m][0] for m in out.modalities[:2]}
        with pytest.raises(ValueError, match="modalities"):
            mas_forward(sems, out.scales[0].robustness, sgf, 0, torch.Generator())

    def test_gradients_flow_through_replay(self):
        """Sampling is detached but the replayed fusion itself trains."""
        torch.manual_seed(13)
        sgf = SemanticGuidedFusion(
            ["cam", "dep"], CHANNELS, 5, SGFConfig(sp_heads=4, rp_heads=2)
        ).train()
        pyr = random_pyramid(13, modalities=("cam", "dep"))
        out = sgf(pyr)
        sems = {m: out.semantics[m][0] for m in out.modalities}
        replay, _ = mas_forward(sems, out.scales[0].robustness, sgf, 0, torch.Generator().manual_seed(1))
        replay.fused.sum().backward()
        grads = [p.grad for p in sgf.sp[0].parameters()]
        assert all(g is not None and torch.isfinite(g).all() for g in grads)
