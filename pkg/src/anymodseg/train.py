"""Training loop: schedule, per-step update, checkpointing, inference.

Determinism is a feature here. Three named RNG streams (``init`` for
parameter initialization, ``data`` for shuffling and augmentation, ``mas``
for modality sampling) are the only randomness, so two ``fit`` calls with
the same configuration and dataset produce identical logs and identical
checkpoint bytes, and ablation variants that do not use a stream are
exactly invariant to its seed.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import model_config_from
from .data import DatasetSplits, ModalityBundle, ModalityImage
from .encoder import collate_bundles
from .heads import LossValues, combined_loss, masked_cross_entropy
from .metrics import MetricsReport, evaluate_model
from .model import MultimodalSegmenter, VARIANTS, build_model, predict_labels
from .sampling import mas_forward

__all__ = [
    "TrainSettings",
    "RngStreams",
    "Checkpoint",
    "FitResult",
    "lr_at",
    "train_step",
    "infer",
    "fit",
    "restore_model",
]

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainSettings:
    variant: str = "c"
    base_lr: float = 6.0e-5
    poly_power: float = 0.9
    epochs: int = 30
    warmup_epochs: int = 3
    warmup_factor: float = 0.1
    warmup_mode: str = "constant"
    weight_decay: float = 0.01
    adam_eps: float = 1.0e-8
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    val_every: int = 10
    subset_dropout: bool = False
    flip: bool = False
    lambda_sgf: float = 2.0
    lambda_mas: float = 1.0
    mas_enabled: bool = True
    mas_epsilon: float = 1.0e-8
    seed_init: int = 0
    seed_data: int = 1
    seed_mas: int = 2
    ignore_index: int = 255

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}' (choose from {VARIANTS})")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        if self.epochs < 0 or self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ValueError(
                f"need 0 <= warmup_epochs <= epochs, got {self.warmup_epochs}/{self.epochs}"
            )
        if not 0 < self.warmup_factor <= 1:
            raise ValueError("warmup_factor must be in (0, 1]")
        if self.warmup_mode not in ("constant", "linear"):
            raise ValueError(f"unknown warmup_mode '{self.warmup_mode}'")
        if self.lambda_sgf < 0 or self.lambda_mas < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainSettings":
        t, lo, m, s = cfg["train"], cfg["loss"], cfg["mas"], cfg["seed"]
        return cls(
            variant=str(t["variant"]),
            base_lr=float(t["base_lr"]),
            poly_power=float(t["poly_power"]),
            epochs=int(t["epochs"]),
            warmup_epochs=int(t["warmup_epochs"]),
            warmup_factor=float(t["warmup_factor"]),
            warmup_mode=str(t["warmup_mode"]),
            weight_decay=float(t["weight_decay"]),
            adam_eps=float(t["adam_eps"]),
            betas=(float(t["beta1"]), float(t["beta2"])),
            batch_size=int(t["batch_size"]),
            val_every=int(t["val_every"]),
            subset_dropout=bool(t["subset_dropout"]),
            flip=bool(cfg["data"]["flip"]),
            lambda_sgf=float(lo["lambda_sgf"]),
            lambda_mas=float(lo["lambda_mas"]),
            mas_enabled=bool(m["enabled"]),
            mas_epsilon=float(m["epsilon"]),
            seed_init=int(s["init"]),
            seed_data=int(s["data"]),
            seed_mas=int(s["mas"]),
        )

    @property
    def mas_active(self) -> bool:
        """Sampling runs only for variant c with a nonzero weight.

        With lambda_mas == 0 the branch would contribute exactly zero
        gradient, so skipping it keeps training bit-identical to variant b
        while saving the replay cost.
        """
        return self.variant == "c" and self.mas_enabled and self.lambda_mas > 0


class RngStreams:
    """Named, independently seeded generators; callers advance them explicitly."""

    NAMES = ("data", "mas")

    def __init__(self, seed_data: int, seed_mas: int):
        self.data = torch.Generator().manual_seed(seed_data)
        self.mas = torch.Generator().manual_seed(seed_mas)

    def state(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name).get_state() for name in self.NAMES}

    def load_state(self, state: dict[str, torch.Tensor]) -> None:
        for name in self.NAMES:
            getattr(self, name).set_state(state[name])


def lr_at(step: int, total_steps: int, settings: TrainSettings) -> float:
    """Learning rate for a 0-based optimizer step.

    Warmup holds (or ramps to) a fraction of the base rate for the first
    ``warmup_epochs / epochs`` of all steps; afterwards the rate decays
    polynomially from exactly ``base_lr`` at the first post-warmup step to
    exactly 0 at ``step == total_steps``.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = (
        round(total_steps * settings.warmup_epochs / settings.epochs) if settings.epochs else 0
    )
    if step < warmup_steps:
        if settings.warmup_mode == "constant":
            return settings.base_lr * settings.warmup_factor
        ramp = settings.warmup_factor + (1 - settings.warmup_factor) * step / warmup_steps
        return settings.base_lr * ramp
    if total_steps == warmup_steps:
        return settings.base_lr
    t = (step - warmup_steps) / (total_steps - warmup_steps)
    return settings.base_lr * (1.0 - t) ** settings.poly_power


def _random_subset(modalities: list[str], generator: torch.Generator) -> list[str]:
    """Uniform non-empty subset, preserving modality order."""
    mask = int(torch.randint(1, 2 ** len(modalities), (1,), generator=generator))
    return [m for i, m in enumerate(modalities) if mask >> i & 1]


def train_step(
    model: MultimodalSegmenter,
    images: dict[str, torch.Tensor],
    labels: torch.Tensor,
    settings: TrainSettings,
    optimizer: torch.optim.Optimizer,
    streams: RngStreams,
) -> tuple[LossValues, list[str]]:
    """One optimization step; returns losses and any sampled modality ids.

    Under the sampling variant, fusion features and the per-scale
    single-modality replays share one head call (packed along the batch
    axis, which the all-linear head makes exact), and both branch losses
    are combined with their configured weights. A non-finite loss aborts
    immediately: optimizing on NaN would silently destroy the run.
    """
    if not model.training:
        raise RuntimeError("train_step requires the model in training mode")
    order = list(images)
    if settings.subset_dropout:
        keep = _random_subset(order, streams.data)
        images = {m: images[m] for m in keep}

    pyramid = model.features(images)
    fused, fusion = model.fuse(pyramid, settings.variant)
    picked: list[str] = []
    batch = labels.shape[0]

    if settings.mas_active:
        assert fusion is not None
        replays = []
        for i in range(len(fused)):
            semantics = {m: fusion.semantics[m][i] for m in fusion.modalities}
            scale_out, who = mas_forward(
                semantics, fusion.robustness[i], model.sgf, i, streams.mas, settings.mas_epsilon
            )
            replays.append(scale_out.fused)
            picked.append(who)
        packed = [torch.cat([f, r], dim=0) for f, r in zip(fused, replays)]
        logits = model.head(packed)
        logits_fusion, logits_replay = logits[:batch], logits[batch:]
        loss_fusion = masked_cross_entropy(logits_fusion, labels, settings.ignore_index)
        loss_replay = masked_cross_entropy(logits_replay, labels, settings.ignore_index)
    else:
        logits_fusion = model.head(fused)
        loss_fusion = masked_cross_entropy(logits_fusion, labels, settings.ignore_index)
        loss_replay = None

    total = combined_loss(loss_fusion, loss_replay, settings.lambda_sgf, settings.lambda_mas)
    if not torch.isfinite(total):
        raise RuntimeError(
            f"loss is not finite ({float(total.detach())}); aborting instead of training on garbage"
        )
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    values = LossValues(
        fusion=float(loss_fusion.detach()),
        sampling=None if loss_replay is None else float(loss_replay.detach()),
        total=float(total.detach()),
    )
    return values, picked


def infer(
    model: MultimodalSegmenter,
    bundle: ModalityBundle,
    subset: set[str] | list[str] | None = None,
    variant: str = "c",
) -> np.ndarray:
    """Predicted (H, W) class map for one bundle; sampling never runs here."""
    return predict_labels(model, bundle, subset=subset, variant=variant).cpu().numpy()


def _flip_bundle(bundle: ModalityBundle) -> ModalityBundle:
    images = {
        name: ModalityImage(name, np.ascontiguousarray(im.pixels[:, ::-1]))
        for name, im in bundle.images.items()
    }
    labels = None if bundle.labels is None else np.ascontiguousarray(bundle.labels[:, ::-1])
    return ModalityBundle(bundle.sample_id, images, labels)


@dataclass
class Checkpoint:
    """Everything needed to rebuild and continue judging a trained model."""

    config: dict
    model_state: dict
    optimizer_state: dict | None
    epoch: int
    best_average_miou: float | None
    rng_state: dict[str, torch.Tensor]
    version: int = CHECKPOINT_VERSION

    def save(self, path: Path | str) -> None:
        payload = {
            "version": self.version,
            "config": self.config,
            "model_state": self.model_state,
            "optimizer_state": self.optimizer_state,
            "epoch": self.epoch,
            "best_average_miou": self.best_average_miou,
            "rng_state": self.rng_state,
        }
        torch.save(payload, path)

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        payload = torch.load(path, map_location="cpu", weights_only=False)
        version = payload.get("version")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
        return cls(
            config=payload["config"],
            model_state=payload["model_state"],
            optimizer_state=payload["optimizer_state"],
            epoch=payload["epoch"],
            best_average_miou=payload["best_average_miou"],
            rng_state=payload["rng_state"],
        )


def restore_model(checkpoint: Checkpoint) -> MultimodalSegmenter:
    model = build_model(model_config_from(checkpoint.config))
    model.load_state_dict(checkpoint.model_state, strict=True)
    model.eval()
    return model


@dataclass
class FitResult:
    checkpoint: Checkpoint
    history: list[dict] = field(default_factory=list)
    log_path: Path | None = None


def fit(cfg: dict, splits: DatasetSplits, out_dir: Path | str | None = None) -> FitResult:
    """Train per the configuration and return the best checkpoint.

    Validation over all modality subsets runs every ``train.val_every``
    epochs and at the end; the retained weights are those with the best
    average mIoU (falling back to the final weights if validation never
    ran). With ``train.epochs=0`` the initialized model is returned
    untouched. A JSONL line per epoch goes to ``out_dir/train_log.jsonl``
    when an output directory is given.
    """
    settings = TrainSettings.from_config(cfg)
    model_cfg = model_config_from(cfg)
    ignore_index = settings.ignore_index
    model = build_model(model_cfg, settings.seed_init)
    streams = RngStreams(settings.seed_data, settings.seed_mas)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=settings.base_lr,
        betas=settings.betas,
        eps=settings.adam_eps,
        weight_decay=settings.weight_decay,
    )

    log_path = None
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
        log_file = log_path.open("w")

    history: list[dict] = []
    best_state: dict | None = None
    best_epoch = -1
    best_score = -math.inf

    def run_validation() -> MetricsReport:
        return evaluate_model(
            model,
            splits.val,
            model_cfg.num_classes,
            ignore_index,
            variant=settings.variant,
        )

    try:
        if settings.epochs > 0:
            train_bundles = splits.train
            if not train_bundles:
                raise ValueError("training split is empty")
            steps_per_epoch = math.ceil(len(train_bundles) / settings.batch_size)
            total_steps = settings.epochs * steps_per_epoch
            step = 0
            model.train()
            for epoch in range(settings.epochs):
                order = torch.randperm(len(train_bundles), generator=streams.data).tolist()
                epoch_losses: list[LossValues] = []
                picked_counts: dict[str, int] = {}
                last_lr = settings.base_lr
                for start in range(0, len(order), settings.batch_size):
                    chunk = [train_bundles[i] for i in order[start : start + settings.batch_size]]
                    if settings.flip:
                        coins = torch.rand(len(chunk), generator=streams.data)
                        chunk = [
                            _flip_bundle(b) if float(c) < 0.5 else b
                            for b, c in zip(chunk, coins)
                        ]
                    images, labels = collate_bundles(chunk)
                    last_lr = lr_at(step, total_steps, settings)
                    for group in optimizer.param_groups:
                        group["lr"] = last_lr
                    values, picked = train_step(
                        model, images, labels, settings, optimizer, streams
                    )
                    epoch_losses.append(values)
                    for who in picked:
                        picked_counts[who] = picked_counts.get(who, 0) + 1
                    step += 1

                record = {
                    "epoch": epoch,
                    "lr": last_lr,
                    "loss_sgf": float(np.mean([v.fusion for v in epoch_losses])),
                    "loss_mas": (
                        float(np.mean([v.sampling for v in epoch_losses]))
                        if epoch_losses[0].sampling is not None
                        else None
                    ),
                    "loss_total": float(np.mean([v.total for v in epoch_losses])),
                }
                if picked_counts:
                    record["sampled"] = dict(sorted(picked_counts.items()))

                is_last = epoch == settings.epochs - 1
                if splits.val and (
                    (settings.val_every > 0 and (epoch + 1) % settings.val_every == 0) or is_last
                ):
                    report = run_validation()
                    score = report.aggregate_miou["average"]
                    record["val_average_miou"] = score
                    if score > best_score:
                        best_score = score
                        best_epoch = epoch
                        best_state = copy.deepcopy(model.state_dict())
                    model.train()

                history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
    finally:
        if log_file is not None:
            log_file.close()

    if best_state is None:
        best_state = copy.deepcopy(model.state_dict())
        best_epoch = settings.epochs - 1

    checkpoint = Checkpoint(
        config=copy.deepcopy(cfg),
        model_state=best_state,
        optimizer_state=optimizer.state_dict() if settings.epochs > 0 else None,
        epoch=best_epoch,
        best_average_miou=None if best_score == -math.inf else best_score,
        rng_state=streams.state(),
    )
    return FitResult(checkpoint=checkpoint, history=history, log_path=log_path)
