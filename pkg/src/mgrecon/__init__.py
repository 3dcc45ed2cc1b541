"""Metric multi-view depth reconstruction and region-level grasp generation.

Up-to-scale per-view depth predictions are aggregated, brought to metric
scale with triangulated matches, refined for cross-view consistency, fused
into a point cloud and turned into parallel-jaw grasps.
"""

from __future__ import annotations

from .camera import Intrinsics, Pose, project, triangulate, unproject
from .errors import MGReconError, StageError
from .fusion import PointCloud, fuse, radius_filter, valid_mask
from .grasp import GraspConfig, GraspPose, generate_grasps, nms_se3
from .observation import CorrespondenceSet, DepthMap, FileBackend, PairPrediction, View, aggregate_depth, filter_matches
from .pipeline import PipelineConfig, PipelineResult, run_directory, run_pipeline
from .refine import RefinementConfig, build_problem, optimize
from .scale import recover_scales

__version__ = "0.1.0"

__all__ = [
    "CorrespondenceSet",
    "DepthMap",
    "FileBackend",
    "GraspConfig",
    "GraspPose",
    "Intrinsics",
    "MGReconError",
    "PairPrediction",
    "PipelineConfig",
    "PipelineResult",
    "PointCloud",
    "Pose",
    "RefinementConfig",
    "StageError",
    "View",
    "aggregate_depth",
    "build_problem",
    "filter_matches",
    "fuse",
    "generate_grasps",
    "nms_se3",
    "optimize",
    "project",
    "radius_filter",
    "recover_scales",
    "run_directory",
    "run_pipeline",
    "triangulate",
    "unproject",
]
