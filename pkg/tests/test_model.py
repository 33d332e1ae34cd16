"""Assembled segmenter: variants, seeded construction, prediction helper."""

from __future__ import annotations

import pytest
import torch

from anymodseg.encoder import collate_bundles
from anymodseg.model import ModelConfig, build_model, predict_labels


class TestConfig:
    def test_duplicate_modalities_rejected(self, tiny_model_config):
        with pytest.raises(ValueError, match="duplicate"):
            ModelConfig(
                modalities=("cam", "cam"),
                num_classes=5,
                encoder=tiny_model_config.encoder,
            )

    def test_empty_modalities_rejected(self, tiny_model_config):
        with pytest.raises(ValueError, match="at least one"):
            ModelConfig(modalities=(), num_classes=5, encoder=tiny_model_config.encoder)

    def test_single_class_rejected(self, tiny_model_config):
        with pytest.raises(ValueError, match="two classes"):
            ModelConfig(
                modalities=("cam",), num_classes=1, encoder=tiny_model_config.encoder
            )


class TestBuild:
    def test_same_seed_same_weights(self, tiny_model_config):
        a = build_model(tiny_model_config, seed=7)
        b = build_model(tiny_model_config, seed=7)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_different_seed_different_weights(self, tiny_model_config):
        a = build_model(tiny_model_config, seed=7)
        b = build_model(tiny_model_config, seed=8)
        assert any(
            not torch.equal(v, b.state_dict()[k]) for k, v in a.state_dict().items()
        )

    def test_global_rng_undisturbed(self, tiny_model_config):
        torch.manual_seed(123)
        before = torch.rand(4)
        torch.manual_seed(123)
        build_model(tiny_model_config, seed=9)
        after = torch.rand(4)
        assert torch.equal(before, after)


class TestVariants:
    def test_additive_variant_sums_features(self, tiny_model, tiny_splits):
        images, _ = collate_bundles(tiny_splits.train[:1])
        pyramid = tiny_model.features(images)
        fused, fusion = tiny_model.fuse(pyramid, "a")
        assert fusion is None
        for i, f in enumerate(fused):
            want = sum(pyramid.features[m][i] for m in pyramid.modalities)
            assert torch.equal(f, want)

    def test_attention_variants_carry_fusion(self, tiny_model, tiny_splits):
        images, _ = collate_bundles(tiny_splits.train[:1])
        pyramid = tiny_model.features(images)
        for variant in ("b", "c"):
            fused, fusion = tiny_model.fuse(pyramid, variant)
            assert fusion is not None
            assert all(torch.equal(x, y) for x, y in zip(fused, fusion.fused))

    def test_unknown_variant_rejected(self, tiny_model, tiny_splits):
        images, _ = collate_bundles(tiny_splits.train[:1])
        pyramid = tiny_model.features(images)
        with pytest.raises(ValueError, match="variant"):
            tiny_model.fuse(pyramid, "d")

    def test_forward_produces_full_resolution_logits(self, tiny_model, tiny_splits):
        out = tiny_model(tiny_splits.train[0])
        assert out.logits.shape == (1, 5, 64, 64)


class TestPredict:
    def test_label_map_shape_and_range(self, tiny_model, tiny_splits):
        labels = predict_labels(tiny_model, tiny_splits.val[0])
        assert labels.shape == (64, 64)
        assert int(labels.min()) >= 0 and int(labels.max()) < 5

    def test_training_flag_restored(self, tiny_model, tiny_splits):
        tiny_model.train()
        predict_labels(tiny_model, tiny_splits.val[0])
        assert tiny_model.training
        tiny_model.eval()
        predict_labels(tiny_model, tiny_splits.val[0])
        assert not tiny_model.training

    def test_subset_prediction_differs_from_full(self, tiny_model, tiny_splits):
        full = predict_labels(tiny_model, tiny_splits.val[0])
        solo = predict_labels(tiny_model, tiny_splits.val[0], subset={"aux"})
        assert full.shape == solo.shape
