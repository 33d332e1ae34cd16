"""Shared fixtures: tiny configs and datasets sized for fast CPU tests."""

from __future__ import annotations

import pytest
import torch

torch.set_num_threads(1)

from anymodseg.config import default_config, synth_spec_from
from anymodseg.data import load_synthetic
from anymodseg.encoder import EncoderConfig
from anymodseg.fusion import SGFConfig
from anymodseg.heads import HeadConfig
from anymodseg.model import ModelConfig, build_model


TINY_CHANNELS = (8, 16, 16, 16)


def tiny_config(**train_overrides) -> dict:
    """Desk defaults shrunk to the smallest useful network and dataset."""
    cfg = default_config()
    cfg["synth"].update(train_samples=8, val_samples=4)
    cfg["model"]["encoder"]["stage_channels"] = list(TINY_CHANNELS)
    cfg["model"]["sp_heads"] = 4
    cfg["model"]["rp_heads"] = 2
    cfg["model"]["head"]["embed_width"] = 16
    cfg["train"].update(epochs=2, warmup_epochs=1, batch_size=4, val_every=0)
    cfg["train"].update(train_overrides)
    return cfg


@pytest.fixture(scope="session")
def tiny_cfg() -> dict:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_splits(tiny_cfg):
    return load_synthetic(synth_spec_from(tiny_cfg))


@pytest.fixture(scope="session")
def tiny_model_config(tiny_cfg) -> ModelConfig:
    return ModelConfig(
        modalities=tuple(tiny_cfg["model"]["modalities"]),
        num_classes=tiny_cfg["model"]["num_classes"],
        encoder=EncoderConfig(stage_channels=TINY_CHANNELS),
        sgf=SGFConfig(sp_heads=4, rp_heads=2),
        head=HeadConfig(embed_width=16),
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_model_config):
    return build_model(tiny_model_config, seed=0)
