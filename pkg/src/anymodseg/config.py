"""Experiment configuration: defaults, YAML files, and dotted overrides.

A configuration is a nested dict whose shape is fixed by ``DEFAULTS``.
Files and ``--override key.path=value`` pairs may only touch keys that
exist there; unknown keys are hard errors so typos cannot silently run a
different experiment. Override values are parsed as YAML scalars, so
``train.epochs=5``, ``mas.enabled=false`` and
``model.encoder.stage_channels=[16,32,64,96]`` all do what they look like.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .data import SynthSpec
from .encoder import EncoderConfig
from .fusion import SGFConfig
from .heads import HeadConfig
from .model import ModelConfig

__all__ = [
    "DEFAULTS",
    "UnknownKeyError",
    "default_config",
    "load_config",
    "apply_overrides",
    "save_config",
    "model_config_from",
    "synth_spec_from",
]

DEFAULTS: dict = {
    "data": {
        "root": None,
        "flip": False,
    },
    "synth": {
        "image_size": 64,
        "train_samples": 200,
        "val_samples": 50,
        "seed": 0,
    },
    "model": {
        "modalities": ["aux", "cam", "dep"],
        "num_classes": 5,
        "sp_heads": 8,
        "rp_heads": 4,
        "mp_kernels": [11, 7, 3],
        "prototype_norm": "none",
        "encoder": {
            "stage_channels": [32, 64, 128, 256],
            "blocks_per_stage": 2,
            "expansion": 2,
        },
        "head": {
            "embed_width": 64,
        },
    },
    "loss": {
        "lambda_sgf": 2.0,
        "lambda_mas": 1.0,
    },
    "mas": {
        "enabled": True,
        "epsilon": 1.0e-8,
    },
    "train": {
        "variant": "c",
        "base_lr": 6.0e-5,
        "poly_power": 0.9,
        "epochs": 30,
        "warmup_epochs": 3,
        "warmup_factor": 0.1,
        "warmup_mode": "constant",
        "weight_decay": 0.01,
        "adam_eps": 1.0e-8,
        "beta1": 0.9,
        "beta2": 0.999,
        "batch_size": 8,
        "val_every": 10,
        "subset_dropout": False,
    },
    "seed": {
        "init": 0,
        "data": 1,
        "mas": 2,
    },
    "eval": {
        "silhouette": False,
        "silhouette_scale": 1,
    },
}


class UnknownKeyError(KeyError):
    """A config file or override referenced a key outside the schema."""

    def __init__(self, key: str):
        super().__init__(key)
        self.key = key

    def __str__(self) -> str:
        return f"unknown config key '{self.key}'"


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, update: dict, prefix: str = "") -> None:
    for key, value in update.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise UnknownKeyError(path)
        if isinstance(base[key], dict) and base[key]:
            if not isinstance(value, dict):
                raise ValueError(f"config key '{path}' expects a mapping, got {value!r}")
            _merge(base[key], value, prefix=f"{path}.")
        else:
            base[key] = value


def load_config(path: Path | str | None = None, overrides: list[str] | None = None) -> dict:
    """Defaults, overlaid by an optional YAML file, then by overrides."""
    cfg = default_config()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        payload = yaml.safe_load(path.read_text()) or {}
        if not isinstance(payload, dict):
            raise ValueError(f"config file {path} must contain a mapping")
        _merge(cfg, payload)
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply ``key.path=value`` pairs in place; values parse as YAML."""
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override '{item}' is not of the form key.path=value")
        key, raw = item.split("=", 1)
        key = key.strip()
        node = cfg
        parts = key.split(".")
        for i, part in enumerate(parts[:-1]):
            if not isinstance(node, dict) or part not in node:
                raise UnknownKeyError(key)
            node = node[part]
        leaf = parts[-1]
        if not isinstance(node, dict) or leaf not in node:
            raise UnknownKeyError(key)
        if isinstance(node[leaf], dict):
            raise ValueError(f"override '{key}' targets a section, not a value")
        value = yaml.safe_load(raw)
        if isinstance(value, str) and isinstance(node[leaf], (int, float)):
            # YAML 1.1 wants a dot in scientific notation; accept 3e-3 anyway
            try:
                value = float(value)
            except ValueError:
                pass
        node[leaf] = value
    return cfg


def save_config(cfg: dict, path: Path | str) -> None:
    """Serialize the effective configuration (stable key order)."""
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True))


def model_config_from(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        modalities=tuple(m["modalities"]),
        num_classes=int(m["num_classes"]),
        encoder=EncoderConfig(
            stage_channels=tuple(m["encoder"]["stage_channels"]),
            blocks_per_stage=int(m["encoder"]["blocks_per_stage"]),
            expansion=int(m["encoder"]["expansion"]),
        ),
        sgf=SGFConfig(
            sp_heads=int(m["sp_heads"]),
            rp_heads=int(m["rp_heads"]),
            mp_kernels=tuple(m["mp_kernels"]),
            prototype_norm=str(m["prototype_norm"]),
        ),
        head=HeadConfig(embed_width=int(m["head"]["embed_width"])),
    )


def synth_spec_from(cfg: dict) -> SynthSpec:
    s = cfg["synth"]
    return SynthSpec.default(
        seed=int(s["seed"]),
        image_size=int(s["image_size"]),
        train_samples=int(s["train_samples"]),
        val_samples=int(s["val_samples"]),
    )
