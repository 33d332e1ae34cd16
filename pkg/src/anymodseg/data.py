"""Dataset types, the on-disk layout, and the synthetic benchmark generator.

A sample is a :class:`ModalityBundle`: one co-registered image per modality
plus an integer label map. Datasets live on disk as one PNG directory per
modality next to a ``labels/`` directory, described by a ``manifest.json``
that pins modality names, channel counts, class names, split membership and
per-modality normalization statistics.

The synthetic generator renders piecewise-constant region layouts under
per-modality "separability profiles": classes outside a modality's profile
all render with one shared palette entry, so that modality genuinely cannot
tell them apart and only fusing complementary modalities can recover the
full label space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

__all__ = [
    "IngestionError",
    "ValidationError",
    "ModalityImage",
    "ModalityBundle",
    "ManifestModality",
    "DatasetManifest",
    "SynthSpec",
    "ModalityProfile",
    "DatasetSplits",
    "load_dataset",
    "generate_synthetic",
    "load_synthetic",
    "write_dataset",
    "make_subset",
    "compute_normalization",
    "normalize_bundle",
    "render_palette",
    "nearest_palette_classifier",
]

DEFAULT_IGNORE_INDEX = 255


class IngestionError(RuntimeError):
    """A sample or file referenced by a manifest could not be read."""


class ValidationError(ValueError):
    """In-memory data violates a structural constraint."""


@dataclass(frozen=True)
class ModalityImage:
    """One modality's pixels for one sample, H x W x channels float32."""

    modality_id: str
    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = self.pixels
        if px.ndim != 3:
            raise ValidationError(
                f"modality '{self.modality_id}': expected H x W x ch array, got shape {px.shape}"
            )
        h, w, ch = px.shape
        if h < 32 or w < 32:
            raise ValidationError(
                f"modality '{self.modality_id}': spatial size {h}x{w} is below the 32-pixel minimum"
            )
        if ch < 1:
            raise ValidationError(f"modality '{self.modality_id}': needs at least one channel")
        if not np.isfinite(px).all():
            raise ValidationError(f"modality '{self.modality_id}': pixels contain non-finite values")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


@dataclass
class ModalityBundle:
    """All modality images of one sample plus an optional label map.

    ``images`` preserves insertion order; that order is the modality order
    downstream code sees, and predictions must not depend on it.
    """

    sample_id: str
    images: dict[str, ModalityImage]
    labels: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not self.images:
            raise ValidationError(f"sample '{self.sample_id}': bundle has no modalities")
        shapes = {(im.height, im.width) for im in self.images.values()}
        if len(shapes) != 1:
            raise ValidationError(
                f"sample '{self.sample_id}': modalities disagree on spatial shape: {sorted(shapes)}"
            )
        for key, im in self.images.items():
            if key != im.modality_id:
                raise ValidationError(
                    f"sample '{self.sample_id}': key '{key}' holds image tagged '{im.modality_id}'"
                )
        if self.labels is not None:
            if self.labels.ndim != 2:
                raise ValidationError(
                    f"sample '{self.sample_id}': labels must be H x W, got shape {self.labels.shape}"
                )
            if self.labels.shape != self.spatial_shape:
                raise ValidationError(
                    f"sample '{self.sample_id}': labels shape {self.labels.shape} "
                    f"does not match images {self.spatial_shape}"
                )
            if not np.issubdtype(self.labels.dtype, np.integer):
                raise ValidationError(f"sample '{self.sample_id}': labels must be integer-typed")

    @property
    def modalities(self) -> list[str]:
        return list(self.images)

    @property
    def spatial_shape(self) -> tuple[int, int]:
        first = next(iter(self.images.values()))
        return first.height, first.width


@dataclass(frozen=True)
class ManifestModality:
    name: str
    channels: int


@dataclass
class DatasetManifest:
    """Declares what a dataset directory contains.

    ``normalization`` maps modality name to per-channel ``mean`` / ``std``
    computed over the train split; loaders apply it so models always see
    standardized inputs.
    """

    modalities: list[ManifestModality]
    class_names: list[str]
    splits: dict[str, list[str]]
    normalization: dict[str, dict[str, list[float]]]
    ignore_index: int = DEFAULT_IGNORE_INDEX

    def __post_init__(self) -> None:
        if not self.modalities:
            raise ValidationError("manifest declares no modalities")
        names = [m.name for m in self.modalities]
        if len(set(names)) != len(names):
            raise ValidationError(f"manifest modality names are not unique: {names}")
        if len(self.class_names) < 2:
            raise ValidationError("manifest must declare at least two classes")
        if 0 <= self.ignore_index < len(self.class_names):
            raise ValidationError(
                f"ignore_index {self.ignore_index} collides with the class range "
                f"[0, {len(self.class_names)})"
            )
        for name, stats in self.normalization.items():
            if name not in names:
                raise ValidationError(f"normalization stats for unknown modality '{name}'")
            ch = next(m.channels for m in self.modalities if m.name == name)
            if len(stats["mean"]) != ch or len(stats["std"]) != ch:
                raise ValidationError(f"normalization stats for '{name}' do not match {ch} channels")
            if any(s <= 0 for s in stats["std"]):
                raise ValidationError(f"normalization std for '{name}' must be positive")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def to_dict(self) -> dict:
        return {
            "modalities": [{"name": m.name, "channels": m.channels} for m in self.modalities],
            "class_names": list(self.class_names),
            "ignore_index": self.ignore_index,
            "splits": {k: list(v) for k, v in self.splits.items()},
            "normalization": {
                k: {"mean": list(v["mean"]), "std": list(v["std"])}
                for k, v in self.normalization.items()
            },
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "DatasetManifest":
        try:
            return cls(
                modalities=[
                    ManifestModality(m["name"], int(m["channels"])) for m in payload["modalities"]
                ],
                class_names=list(payload["class_names"]),
                splits={k: list(v) for k, v in payload["splits"].items()},
                normalization=payload.get("normalization", {}),
                ignore_index=int(payload.get("ignore_index", DEFAULT_IGNORE_INDEX)),
            )
        except KeyError as exc:
            raise IngestionError(f"manifest is missing required key {exc}") from exc

    def save(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: Path | str) -> "DatasetManifest":
        path = Path(path)
        if not path.exists():
            raise IngestionError(f"manifest not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))


@dataclass
class DatasetSplits:
    """A loaded dataset: its manifest plus per-split bundle lists."""

    manifest: DatasetManifest
    train: list[ModalityBundle]
    val: list[ModalityBundle]


# --------------------------------------------------------------------------
# Disk layout
# --------------------------------------------------------------------------


def _read_png(path: Path, channels: int) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] != channels:
        raise IngestionError(f"{path}: expected {channels} channel(s), found {arr.shape[2]}")
    return arr.astype(np.float32) / 255.0


def load_dataset(
    root: Path | str,
    manifest: DatasetManifest | None = None,
    split: str = "train",
    normalize: bool = True,
) -> list[ModalityBundle]:
    """Read one split from ``root`` into validated, normalized bundles.

    Missing files raise :class:`IngestionError` naming the sample and
    modality; structural problems (shape or label-range violations) raise
    :class:`ValidationError`.
    """
    root = Path(root)
    if manifest is None:
        manifest = DatasetManifest.load(root / "manifest.json")
    if split not in manifest.splits:
        raise IngestionError(f"manifest has no split '{split}' (has {sorted(manifest.splits)})")

    bundles = []
    for sample_id in manifest.splits[split]:
        images: dict[str, ModalityImage] = {}
        for mod in manifest.modalities:
            path = root / mod.name / f"{sample_id}.png"
            if not path.exists():
                raise IngestionError(f"sample '{sample_id}': missing modality '{mod.name}' at {path}")
            images[mod.name] = ModalityImage(mod.name, _read_png(path, mod.channels))
        label_path = root / "labels" / f"{sample_id}.png"
        if not label_path.exists():
            raise IngestionError(f"sample '{sample_id}': missing labels at {label_path}")
        labels = np.asarray(Image.open(label_path)).astype(np.int64)
        valid = (labels == manifest.ignore_index) | (
            (labels >= 0) & (labels < manifest.num_classes)
        )
        if not valid.all():
            bad = np.unique(labels[~valid])
            raise ValidationError(
                f"sample '{sample_id}': label values {bad.tolist()} outside "
                f"[0, {manifest.num_classes}) and ignore index {manifest.ignore_index}"
            )
        bundle = ModalityBundle(sample_id, images, labels)
        if normalize:
            bundle = normalize_bundle(bundle, manifest)
        bundles.append(bundle)
    return bundles


def normalize_bundle(bundle: ModalityBundle, manifest: DatasetManifest) -> ModalityBundle:
    """Standardize each modality with the manifest's train-split statistics."""
    images = {}
    for name, im in bundle.images.items():
        stats = manifest.normalization.get(name)
        if stats is None:
            images[name] = im
            continue
        mean = np.asarray(stats["mean"], dtype=np.float32)
        std = np.asarray(stats["std"], dtype=np.float32)
        images[name] = ModalityImage(name, (im.pixels - mean) / std)
    return ModalityBundle(bundle.sample_id, images, bundle.labels)


def compute_normalization(
    bundles: list[ModalityBundle], modality_names: list[str]
) -> dict[str, dict[str, list[float]]]:
    """Per-modality per-channel mean/std over all pixels of all bundles."""
    stats = {}
    for name in modality_names:
        stacked = np.concatenate(
            [b.images[name].pixels.reshape(-1, b.images[name].channels) for b in bundles], axis=0
        ).astype(np.float64)
        mean = stacked.mean(axis=0)
        std = stacked.std(axis=0)
        std = np.maximum(std, 1e-6)  # degenerate constant channels still need std > 0
        stats[name] = {"mean": [float(v) for v in mean], "std": [float(v) for v in std]}
    return stats


def make_subset(bundle: ModalityBundle, keep: set[str] | list[str]) -> ModalityBundle:
    """Drop modalities not in ``keep``, preserving the bundle's original order."""
    keep = set(keep)
    unknown = keep - set(bundle.images)
    if unknown:
        raise ValidationError(
            f"sample '{bundle.sample_id}': unknown modalities {sorted(unknown)} "
            f"(bundle has {bundle.modalities})"
        )
    if not keep:
        raise ValidationError(f"sample '{bundle.sample_id}': subset must keep at least one modality")
    images = {name: im for name, im in bundle.images.items() if name in keep}
    return ModalityBundle(bundle.sample_id, images, bundle.labels)


# --------------------------------------------------------------------------
# Synthetic benchmark
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ModalityProfile:
    """How one synthetic modality renders the label space.

    Classes in ``discriminable`` each get their own palette entry; every
    other class renders with one shared entry, so this modality cannot
    distinguish them from each other. ``noise`` is the sigma of additive
    Gaussian pixel noise.
    """

    name: str
    channels: int
    discriminable: frozenset[int]
    noise: float = 0.0

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ValidationError(f"modality '{self.name}': needs at least one channel")
        if self.noise < 0:
            raise ValidationError(f"modality '{self.name}': noise must be nonnegative")
        if not self.discriminable:
            raise ValidationError(f"modality '{self.name}': empty separability profile")


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a deterministic synthetic multimodal dataset."""

    profiles: tuple[ModalityProfile, ...]
    num_classes: int = 5
    image_size: int = 64
    train_samples: int = 200
    val_samples: int = 50
    seed: int = 0
    regions_per_image: int = 12
    ignore_index: int = DEFAULT_IGNORE_INDEX
    ignore_border: int = 0

    def __post_init__(self) -> None:
        if len(self.profiles) < 2:
            raise ValidationError("synthetic datasets need at least two modalities")
        if self.num_classes < 2:
            raise ValidationError("synthetic datasets need at least two classes")
        if self.image_size % 32 != 0:
            raise ValidationError(f"image_size {self.image_size} must be divisible by 32")
        names = [p.name for p in self.profiles]
        if len(set(names)) != len(names):
            raise ValidationError(f"modality names are not unique: {names}")
        all_classes = set(range(self.num_classes))
        for p in self.profiles:
            if not p.discriminable <= all_classes:
                raise ValidationError(
                    f"modality '{p.name}': profile {sorted(p.discriminable)} references "
                    f"classes outside [0, {self.num_classes})"
                )
        covered = set().union(*(p.discriminable for p in self.profiles))
        orphans = all_classes - covered
        if orphans:
            raise ValidationError(f"classes {sorted(orphans)} are discriminable by no modality")
        min_noise = min(p.noise for p in self.profiles)
        fragile = any(
            len(p.discriminable) <= self.num_classes - 2 or p.noise > 2 * min_noise + 1e-9
            for p in self.profiles
        )
        if not fragile:
            raise ValidationError(
                "no fragile modality: every profile covers nearly all classes at the lowest noise"
            )

    @classmethod
    def default(cls, seed: int = 0, image_size: int = 64, train_samples: int = 200,
                val_samples: int = 50) -> "SynthSpec":
        """Three complementary modalities over five classes.

        No single modality separates all classes: ``cam`` merges {3, 4},
        ``dep`` merges {0, 1, 4}, and the noisy ``aux`` merges {0, 1, 2}.
        Together every class pair is separable somewhere, so fusion strictly
        dominates any single stream.
        """
        return cls(
            profiles=(
                ModalityProfile("aux", 1, frozenset({3, 4}), noise=0.20),
                ModalityProfile("cam", 3, frozenset({0, 1, 2}), noise=0.02),
                ModalityProfile("dep", 1, frozenset({2, 3}), noise=0.05),
            ),
            num_classes=5,
            image_size=image_size,
            train_samples=train_samples,
            val_samples=val_samples,
            seed=seed,
        )


def _quantize(values: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid so PNG round-trips reproduce floats exactly."""
    return np.round(values * 255.0) / 255.0


def render_palette(profile: ModalityProfile, num_classes: int) -> np.ndarray:
    """Per-class rendered base values, shape (num_classes, channels).

    Discriminable classes get evenly spaced values; all remaining classes
    share one entry. Values are 8-bit exact and pairwise distinct across
    groups in every channel.
    """
    groups: list[list[int]] = [[k] for k in sorted(profile.discriminable)]
    merged = [k for k in range(num_classes) if k not in profile.discriminable]
    if merged:
        groups.append(merged)
    n = len(groups)
    palette = np.zeros((num_classes, profile.channels), dtype=np.float32)
    for gi, members in enumerate(groups):
        for ch in range(profile.channels):
            # offset per channel keeps multichannel entries from being scalar multiples
            frac = (gi + 1 + 0.35 * ch) / (n + 1 + 0.35 * profile.channels)
            value = _quantize(np.float32(0.08 + 0.84 * frac))
            palette[members, ch] = value
    return palette


def _region_labels(size: int, num_classes: int, regions: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-constant label map: nearest-seed-point regions."""
    centers = rng.uniform(0, size, size=(regions, 2))
    classes = np.concatenate(
        [rng.permutation(num_classes), rng.integers(0, num_classes, size=max(0, regions - num_classes))]
    )[:regions]
    yy, xx = np.mgrid[0:size, 0:size]
    d2 = (yy[None] - centers[:, 0, None, None]) ** 2 + (xx[None] - centers[:, 1, None, None]) ** 2
    return classes[np.argmin(d2, axis=0)].astype(np.int64)


def _render_sample(
    spec: SynthSpec, palettes: dict[str, np.ndarray], sample_id: str, rng: np.random.Generator
) -> ModalityBundle:
    labels = _region_labels(spec.image_size, spec.num_classes, spec.regions_per_image, rng)
    images = {}
    for profile in spec.profiles:
        base = palettes[profile.name][labels]  # H x W x ch
        if profile.noise > 0:
            base = base + rng.normal(0.0, profile.noise, size=base.shape)
        pixels = np.clip(base, 0.0, 1.0).astype(np.float32)
        images[profile.name] = ModalityImage(profile.name, pixels)
    out_labels = labels
    if spec.ignore_border > 0:
        out_labels = labels.copy()
        b = spec.ignore_border
        out_labels[:b, :] = spec.ignore_index
        out_labels[-b:, :] = spec.ignore_index
        out_labels[:, :b] = spec.ignore_index
        out_labels[:, -b:] = spec.ignore_index
    return ModalityBundle(sample_id, images, out_labels)


def generate_synthetic(spec: SynthSpec) -> DatasetSplits:
    """Materialize the dataset described by ``spec``.

    Every sample is a pure function of ``(spec.seed, split, index)`` via
    spawned RNG streams, so repeated calls agree bit for bit and samples
    could be generated independently in any order.
    """
    palettes = {p.name: render_palette(p, spec.num_classes) for p in spec.profiles}
    splits: dict[str, list[ModalityBundle]] = {}
    for split_index, (split, count) in enumerate(
        [("train", spec.train_samples), ("val", spec.val_samples)]
    ):
        bundles = []
        for i in range(count):
            rng = np.random.default_rng([spec.seed, split_index, i])
            bundles.append(_render_sample(spec, palettes, f"{split}_{i:04d}", rng))
        splits[split] = bundles

    modalities = [ManifestModality(p.name, p.channels) for p in spec.profiles]
    manifest = DatasetManifest(
        modalities=modalities,
        class_names=[f"class_{k}" for k in range(spec.num_classes)],
        splits={k: [b.sample_id for b in v] for k, v in splits.items()},
        normalization={},
        ignore_index=spec.ignore_index,
    )
    return DatasetSplits(manifest, splits["train"], splits["val"])


def load_synthetic(spec: SynthSpec) -> DatasetSplits:
    """Generate, quantize and normalize in memory.

    Matches ``write_dataset`` followed by ``load_dataset`` bit for bit:
    pixels are snapped to the 8-bit grid, statistics come from the
    quantized train split, and every bundle is standardized with them.
    """
    raw = generate_synthetic(spec)
    quantized = {
        split: [
            ModalityBundle(
                b.sample_id,
                {n: ModalityImage(n, _quantize(im.pixels).astype(np.float32)) for n, im in b.images.items()},
                b.labels,
            )
            for b in bundles
        ]
        for split, bundles in [("train", raw.train), ("val", raw.val)]
    }
    stats = compute_normalization(quantized["train"], raw.manifest.modality_names)
    manifest = DatasetManifest(
        modalities=raw.manifest.modalities,
        class_names=raw.manifest.class_names,
        splits=raw.manifest.splits,
        normalization=stats,
        ignore_index=raw.manifest.ignore_index,
    )
    return DatasetSplits(
        manifest=manifest,
        train=[normalize_bundle(b, manifest) for b in quantized["train"]],
        val=[normalize_bundle(b, manifest) for b in quantized["val"]],
    )


def write_dataset(splits: DatasetSplits, root: Path | str) -> DatasetManifest:
    """Write bundles as PNG trees plus a manifest with train-split statistics.

    Pixels are quantized to 8 bits on write; statistics are computed from
    the quantized arrays so that loading reproduces the stored distribution
    exactly. Returns the manifest that was written.
    """
    root = Path(root)
    manifest = splits.manifest
    quantized: dict[str, list[ModalityBundle]] = {}
    for split_name, bundles in [("train", splits.train), ("val", splits.val)]:
        out = []
        for bundle in bundles:
            images = {}
            for name, im in bundle.images.items():
                images[name] = ModalityImage(name, _quantize(im.pixels).astype(np.float32))
            out.append(ModalityBundle(bundle.sample_id, images, bundle.labels))
        quantized[split_name] = out

    stats = compute_normalization(quantized["train"], manifest.modality_names)
    manifest = DatasetManifest(
        modalities=manifest.modalities,
        class_names=manifest.class_names,
        splits=manifest.splits,
        normalization=stats,
        ignore_index=manifest.ignore_index,
    )

    for mod in manifest.modalities:
        (root / mod.name).mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for bundles in quantized.values():
        for bundle in bundles:
            for name, im in bundle.images.items():
                arr = np.round(im.pixels * 255.0).astype(np.uint8)
                if arr.shape[2] == 1:
                    arr = arr[:, :, 0]
                Image.fromarray(arr).save(root / name / f"{bundle.sample_id}.png")
            labels = bundle.labels.astype(np.uint8)
            Image.fromarray(labels).save(root / "labels" / f"{bundle.sample_id}.png")
    manifest.save(root / "manifest.json")
    return manifest


def nearest_palette_classifier(
    pixels: np.ndarray, palette: np.ndarray, classes: list[int] | None = None
) -> np.ndarray:
    """Assign each pixel the class whose rendered value is nearest.

    A reference decoder for synthetic data: on a zero-noise modality whose
    profile covers every class this is exact by construction.
    """
    flat = pixels.reshape(-1, pixels.shape[2])
    candidates = np.arange(palette.shape[0]) if classes is None else np.asarray(classes)
    d2 = ((flat[:, None, :] - palette[candidates][None, :, :]) ** 2).sum(axis=2)
    picked = candidates[np.argmin(d2, axis=1)]
    return picked.reshape(pixels.shape[:2])
