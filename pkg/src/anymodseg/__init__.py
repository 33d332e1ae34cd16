"""Multimodal semantic segmentation robust to missing modalities.

The model fuses any non-empty subset of its modalities with
prototype-guided cross-attention and, during training, replays fusion on
stochastically sampled single modalities so weak streams keep learning.
"""

from .data import (
    DatasetManifest,
    DatasetSplits,
    IngestionError,
    ModalityBundle,
    ModalityImage,
    ModalityProfile,
    SynthSpec,
    ValidationError,
    generate_synthetic,
    load_dataset,
    load_synthetic,
    make_subset,
    write_dataset,
)
from .diagnostics import (
    DiagnosticsReport,
    collect_diagnostics,
    complexity_report,
    intra_class_variance,
    robustness_scalars,
)
from .encoder import EncoderConfig, FeaturePyramid, SharedEncoder, extract_features
from .fusion import (
    RobustnessPerceptron,
    SemanticGuidedFusion,
    SGFConfig,
    SpatialPerceptron,
    build_prototypes,
)
from .heads import HeadConfig, SegHead, combined_loss, masked_cross_entropy
from .metrics import (
    MetricsReport,
    aggregate,
    confusion_matrix,
    enumerate_subsets,
    evaluate_model,
    f1_per_class,
    iou_per_class,
    mean_f1,
    mean_iou,
)
from .model import ModelConfig, MultimodalSegmenter, build_model
from .sampling import invert_robustness, mas_forward, pool_probabilities, sample_modality
from .train import Checkpoint, RngStreams, TrainSettings, fit, infer, lr_at, restore_model, train_step

__version__ = "0.1.0"

__all__ = [
    "__version__",
    # data
    "ModalityImage",
    "ModalityBundle",
    "DatasetManifest",
    "DatasetSplits",
    "SynthSpec",
    "ModalityProfile",
    "IngestionError",
    "ValidationError",
    "load_dataset",
    "generate_synthetic",
    "load_synthetic",
    "write_dataset",
    "make_subset",
    # model
    "EncoderConfig",
    "SharedEncoder",
    "FeaturePyramid",
    "extract_features",
    "SGFConfig",
    "SemanticGuidedFusion",
    "SpatialPerceptron",
    "RobustnessPerceptron",
    "build_prototypes",
    "invert_robustness",
    "pool_probabilities",
    "sample_modality",
    "mas_forward",
    "HeadConfig",
    "SegHead",
    "masked_cross_entropy",
    "combined_loss",
    "ModelConfig",
    "MultimodalSegmenter",
    "build_model",
    # training
    "TrainSettings",
    "RngStreams",
    "Checkpoint",
    "lr_at",
    "train_step",
    "infer",
    "fit",
    "restore_model",
    # evaluation
    "enumerate_subsets",
    "confusion_matrix",
    "iou_per_class",
    "f1_per_class",
    "mean_iou",
    "mean_f1",
    "aggregate",
    "evaluate_model",
    "MetricsReport",
    "intra_class_variance",
    "robustness_scalars",
    "complexity_report",
    "collect_diagnostics",
    "DiagnosticsReport",
]
