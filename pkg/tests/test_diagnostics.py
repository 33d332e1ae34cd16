"""Feature-compactness scores, robustness summaries, complexity accounting."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from anymodseg.diagnostics import (
    DiagnosticsReport,
    collect_diagnostics,
    complexity_report,
    downsample_labels,
    intra_class_variance,
    robustness_scalars,
)
from anymodseg.encoder import EncoderConfig
from anymodseg.fusion import SGFConfig
from anymodseg.heads import HeadConfig
from anymodseg.model import ModelConfig

from conftest import TINY_CHANNELS


class TestDownsampleLabels:
    def test_picks_cell_centers(self):
        labels = np.arange(16).reshape(4, 4)
        got = downsample_labels(labels, (2, 2))
        assert got.tolist() == [[5, 7], [13, 15]]

    def test_identity_at_same_size(self):
        labels = np.arange(9).reshape(3, 3)
        assert np.array_equal(downsample_labels(labels, (3, 3)), labels)


class TestIntraClassVariance:
    def test_two_member_class_frozen_case(self):
        """Two pixels u, v in one class score |u' - v'|^2 / 2 after the
        per-channel standardization, computed independently here."""
        features = np.array([[[1.0, 2.0], [3.0, 5.0]]])  # (1, 2, C=2)
        labels = np.zeros((1, 2), dtype=np.int64)
        got = intra_class_variance(features, labels)

        flat = features.reshape(-1, 2).astype(np.float64)
        std = flat.std(axis=0)
        u, v = flat / np.maximum(std, 1e-12)
        want = float(((u - v) ** 2).sum() / 2.0)
        assert got == {0: pytest.approx(want, rel=1e-12)}
        # with both channels standardized to unit spread, u' - v' = (2, 2)
        assert want == pytest.approx(4.0, rel=1e-12)

    def test_singleton_classes_omitted(self):
        features = np.random.default_rng(0).normal(size=(2, 2, 3))
        labels = np.array([[0, 0], [0, 1]])
        got = intra_class_variance(features, labels)
        assert set(got) == {0}

    def test_ignored_label_skipped(self):
        features = np.random.default_rng(1).normal(size=(2, 2, 3))
        labels = np.array([[255, 255], [1, 1]])
        assert set(intra_class_variance(features, labels)) == {1}

    def test_full_resolution_labels_downsampled(self):
        rng = np.random.default_rng(2)
        features = rng.normal(size=(4, 4, 3))
        labels = np.zeros((16, 16), dtype=np.int64)
        labels[8:] = 1
        got = intra_class_variance(features, labels)
        assert set(got) == {0, 1}

    def test_tight_cluster_scores_below_loose_cluster(self):
        rng = np.random.default_rng(3)
        base = rng.normal(size=(1, 8, 4))
        tight = base + 0.01 * rng.normal(size=(1, 8, 4))
        loose = base + 10.0 * rng.normal(size=(1, 8, 4))
        labels = np.zeros((1, 8), dtype=np.int64)
        features = np.concatenate([tight, loose], axis=0)  # (2, 8, 4)
        labels2 = np.concatenate([labels, labels + 1], axis=0)
        got = intra_class_variance(features, labels2)
        assert got[0] < got[1]

    def test_rank_validated(self):
        with pytest.raises(ValueError, match="H, W, C"):
            intra_class_variance(np.zeros((4, 4)), np.zeros((4, 4), dtype=np.int64))


class TestRobustnessScalars:
    def test_means_per_scale_sum_to_one(self):
        g = torch.Generator().manual_seed(0)
        maps = [
            [torch.softmax(torch.randn(1, 3, 8, 8, generator=g), dim=1) for _ in range(2)]
            for _ in range(4)
        ]
        scalars = robustness_scalars(maps, ["a", "b", "c"])
        assert len(scalars) == 2
        for scale in scalars:
            assert sum(scale.values()) == pytest.approx(1.0, abs=1e-6)

    def test_matches_manual_mean(self):
        maps = [[torch.tensor([[[[0.25, 0.75]], [[0.75, 0.25]]]])]]  # (1, 2, 1, 2)
        scalars = robustness_scalars(maps, ["x", "y"])
        assert scalars[0] == {"x": pytest.approx(0.5), "y": pytest.approx(0.5)}

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no robustness"):
            robustness_scalars([], ["a"])


def tiny_complexity_config(
    modalities=("aux", "cam", "dep"), num_classes=5
) -> ModelConfig:
    return ModelConfig(
        modalities=tuple(modalities),
        num_classes=num_classes,
        encoder=EncoderConfig(stage_channels=TINY_CHANNELS),
        sgf=SGFConfig(sp_heads=4, rp_heads=2),
        head=HeadConfig(embed_width=16),
    )


class TestComplexity:
    def test_parameter_count_matches_real_model(self, tiny_model):
        """Closed-form counts must equal torch's numel sum exactly."""
        report = complexity_report(tiny_model.config, (64, 64))
        true_total = sum(p.numel() for p in tiny_model.parameters())
        assert report["total"]["params"] == true_total

    def test_parameters_independent_of_image_size(self):
        config = tiny_complexity_config()
        small = complexity_report(config, (64, 64))
        large = complexity_report(config, (256, 320))
        for key in ("encoder", "sgf", "head"):
            assert small[key]["params"] == large[key]["params"]

    def test_flops_scale_with_pixels(self):
        """Everything except the prototype query projection (per class, not
        per pixel) is linear in pixel count."""
        config = tiny_complexity_config()
        small = complexity_report(config, (64, 64))
        large = complexity_report(config, (128, 128))
        assert large["encoder"]["flops"] == 4 * small["encoder"]["flops"]
        assert large["head"]["flops"] == 4 * small["head"]["flops"]
        small_px = small["sgf"]["flops"]["total"] - small["sgf"]["flops"]["sp_query"]
        large_px = large["sgf"]["flops"]["total"] - large["sgf"]["flops"]["sp_query"]
        assert large_px == 4 * small_px
        assert large["sgf"]["flops"]["sp_query"] == small["sgf"]["flops"]["sp_query"]

    def test_class_filter_flops_formula(self):
        """CSF cost is pixels x channels x classes per modality, summed."""
        config = tiny_complexity_config()
        report = complexity_report(config, (64, 64))
        grids = config.encoder.grid_sizes(64, 64)
        want = sum(
            3 * gh * gw * c * config.num_classes
            for (gh, gw), c in zip(grids, TINY_CHANNELS)
        )
        assert report["sgf"]["flops"]["csf"] == want

    def test_modality_doubling_exactly_doubles_marked_paths(self):
        base = complexity_report(tiny_complexity_config(("a", "b", "c")), (64, 64))
        double = complexity_report(
            tiny_complexity_config(("a", "b", "c", "d", "e", "f")), (64, 64)
        )
        ratio = double["sgf"]["flops"]["modality_scaling"] / base["sgf"]["flops"]["modality_scaling"]
        assert ratio == 2.0
        assert double["encoder"]["flops"] == 2 * base["encoder"]["flops"]

    def test_class_doubling_exactly_doubles_marked_paths(self):
        base = complexity_report(tiny_complexity_config(num_classes=5), (64, 64))
        double = complexity_report(tiny_complexity_config(num_classes=10), (64, 64))
        ratio = double["sgf"]["flops"]["class_scaling"] / base["sgf"]["flops"]["class_scaling"]
        assert ratio == 2.0

    def test_sampling_replay_is_single_modality_fusion(self):
        config = tiny_complexity_config()
        report = complexity_report(config, (64, 64))
        solo = complexity_report(tiny_complexity_config(("cam",)), (64, 64))
        assert report["mas"]["flops"]["total"] == solo["sgf"]["flops"]["total"]

    def test_indivisible_size_rejected(self):
        with pytest.raises(ValueError, match="divisible by 32"):
            complexity_report(tiny_complexity_config(), (60, 64))


class TestCollect:
    def test_fused_variant_reports_all_sections(self, tiny_model, tiny_splits):
        report = collect_diagnostics(tiny_model, tiny_splits.val, variant="c")
        assert report.modalities == ("aux", "cam", "dep")
        assert len(report.robustness) == 4
        for scale in report.robustness:
            assert sum(scale.values()) == pytest.approx(1.0, abs=1e-5)
        assert len(report.variance) == 4
        assert all(v >= 0 for scale in report.variance for v in scale.values())
        assert report.complexity["total"]["params"] > 0
        assert report.silhouette is None

    def test_additive_variant_has_no_robustness(self, tiny_model, tiny_splits):
        report = collect_diagnostics(tiny_model, tiny_splits.val, variant="a")
        assert report.robustness == []

    def test_silhouette_scores_per_modality(self, tiny_model, tiny_splits):
        report = collect_diagnostics(
            tiny_model, tiny_splits.val, variant="c", silhouette=True
        )
        assert report.silhouette
        assert set(report.silhouette) <= {"aux", "cam", "dep"}
        for v in report.silhouette.values():
            assert -1.0 <= v <= 1.0

    def test_empty_bundles_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="no bundles"):
            collect_diagnostics(tiny_model, [])

    def test_json_round_trip(self, tiny_model, tiny_splits, tmp_path):
        report = collect_diagnostics(tiny_model, tiny_splits.val[:2], variant="c")
        path = tmp_path / "diag.json"
        report.save_json(path)
        loaded = DiagnosticsReport.load_json(path)
        assert loaded.modalities == report.modalities
        assert loaded.robustness == report.robustness
        assert loaded.variance == report.variance
        assert loaded.complexity == report.complexity

    def test_csv_rows_labeled_by_kind(self, tiny_model, tiny_splits):
        report = collect_diagnostics(tiny_model, tiny_splits.val[:1], variant="c")
        lines = report.to_csv().strip().splitlines()
        assert lines[0] == "kind,scale,key,value"
        kinds = {line.split(",")[0] for line in lines[1:]}
        assert kinds == {"robustness", "variance"}
