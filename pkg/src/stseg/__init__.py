"""Unsupervised LiDAR segmentation from spatiotemporal point correspondences."""

from .cascade import CascadeConfig, CascadeResult, cascade_segment
from .cloud import (
    KdIndex,
    PointCloud,
    RangeImage,
    RigidTransform,
    SensorFov,
    point_pixels,
    project_to_range_image,
    read_kitti_bin,
    read_labels,
    write_kitti_bin,
    write_labels,
    write_ply,
)
from .cluster import DBSCAN, MiniBatchKMeans
from .config import PipelineConfig, load_config, save_config
from .correspond import CorrespondConfig, build_correspondences
from .dynamics import DynamicsConfig, dynamic_scores
from .embed import EmbeddingNet, load_checkpoint, save_checkpoint
from .evalkit import ConfusionMatrix, evaluate_labels, write_report
from .preprocess import AlignConfig, align_sequence, icp_align, segment_ground
from .synth import (
    GroundTruthSequence,
    SceneSpec,
    benchmark_scenes,
    demo_scene,
    intersection_scene,
    render_sequence,
)
from .tracking import TrackingConfig, track_boxes
from .train import (
    SpatioTemporalSegmenter,
    TrainConfig,
    TrainingData,
    autolabel_sequence,
    predict_point_labels,
    train_model,
)

__version__ = "0.1.0"

__all__ = [
    "AlignConfig",
    "CascadeConfig",
    "CascadeResult",
    "ConfusionMatrix",
    "CorrespondConfig",
    "DBSCAN",
    "DynamicsConfig",
    "EmbeddingNet",
    "GroundTruthSequence",
    "KdIndex",
    "MiniBatchKMeans",
    "PipelineConfig",
    "PointCloud",
    "RangeImage",
    "RigidTransform",
    "SceneSpec",
    "SensorFov",
    "SpatioTemporalSegmenter",
    "TrackingConfig",
    "TrainConfig",
    "TrainingData",
    "align_sequence",
    "autolabel_sequence",
    "benchmark_scenes",
    "build_correspondences",
    "cascade_segment",
    "demo_scene",
    "dynamic_scores",
    "evaluate_labels",
    "icp_align",
    "intersection_scene",
    "load_checkpoint",
    "load_config",
    "point_pixels",
    "predict_point_labels",
    "project_to_range_image",
    "read_kitti_bin",
    "read_labels",
    "render_sequence",
    "save_checkpoint",
    "save_config",
    "segment_ground",
    "track_boxes",
    "train_model",
    "write_kitti_bin",
    "write_labels",
    "write_ply",
    "write_report",
    "__version__",
]
