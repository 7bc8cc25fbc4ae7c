"""Multimodal fusion networks with modality dropping, plus the skeleton
descriptor and temporal localization pipeline built on top of them."""

from .network import (
    FusionParams,
    ModalityBatch,
    ModalitySample,
    NetworkTopology,
    PretrainedPath,
    SharedParams,
    forward,
    forward_batch,
    geometric_mean_fusion,
    init_shared_from_pretrained,
    parameter_count,
)
from .numerics import SeededRng
from .training import (
    ModalityDataset,
    StageKind,
    StagePlan,
    StageSpec,
    TrainingConfig,
    TrainingRun,
    evaluate_fused,
    fuse_train,
    predict_fused,
    pretrain_modality,
)
from .skeleton import (
    JOINTS,
    SkeletonTree,
    descriptor_sequence,
    dynamic_pose_sequence,
    make_dynamic_pose,
    normalize_skeleton,
)
from .temporal import (
    MotionClassifier,
    ScoreSequence,
    SegmentLabeling,
    aggregate_scores,
    jaccard_index,
    mean_jaccard,
    refine_boundaries,
)
from .experiments import (
    ExperimentConfig,
    PipelineConfig,
    parse_architecture,
    run_gesture_pipeline,
    run_mnist_comparison,
    run_mnist_experiment,
)
from .model import (
    DescriptorStandardizer,
    ModalityFusionClassifier,
    PoseDescriptorExtractor,
)
from .persistence import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "DescriptorStandardizer",
    "ExperimentConfig",
    "FusionParams",
    "JOINTS",
    "ModalityBatch",
    "ModalityDataset",
    "ModalityFusionClassifier",
    "ModalitySample",
    "MotionClassifier",
    "NetworkTopology",
    "PipelineConfig",
    "PoseDescriptorExtractor",
    "PretrainedPath",
    "ScoreSequence",
    "SeededRng",
    "SegmentLabeling",
    "SharedParams",
    "SkeletonTree",
    "StageKind",
    "StagePlan",
    "StageSpec",
    "TrainingConfig",
    "TrainingRun",
    "aggregate_scores",
    "descriptor_sequence",
    "dynamic_pose_sequence",
    "evaluate_fused",
    "forward",
    "forward_batch",
    "fuse_train",
    "geometric_mean_fusion",
    "init_shared_from_pretrained",
    "jaccard_index",
    "make_dynamic_pose",
    "mean_jaccard",
    "normalize_skeleton",
    "parameter_count",
    "parse_architecture",
    "predict_fused",
    "pretrain_modality",
    "refine_boundaries",
    "run_gesture_pipeline",
    "run_mnist_comparison",
    "run_mnist_experiment",
    "save_model",
    "load_model",
]
