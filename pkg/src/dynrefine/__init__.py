"""Mask-conditioned refinement of camera poses, video depth, and 4D tracks."""

from .ba import BundleAdjuster, PointTrack, WindowProblem, chain_tracks, refine_sequence
from .cvd import DepthOptimizer, DepthSolution, optimize_depth
from .geometry import Intrinsics, PoseSE3, SimilarityTransform, project, umeyama_align, unproject
from .masks import DynamicMaskSequence, InstanceMaskSequence, merge_masks
from .metrics import depth_metrics, mask_metrics, trajectory_metrics
from .optim import LossEvaluation
from .sceneio import FrameBundle, PixelTrack, SequenceManifest, read_sequence, write_outputs
from .synth import SceneSpec, SyntheticScene, generate
from .track4d import MotionScore, Track3D, TrackOptimizer, optimize_track, sigmoid_weight

__version__ = "0.1.0"

__all__ = [
    "BundleAdjuster",
    "DepthOptimizer",
    "DepthSolution",
    "DynamicMaskSequence",
    "FrameBundle",
    "InstanceMaskSequence",
    "Intrinsics",
    "LossEvaluation",
    "MotionScore",
    "PixelTrack",
    "PointTrack",
    "PoseSE3",
    "SceneSpec",
    "SequenceManifest",
    "SimilarityTransform",
    "SyntheticScene",
    "Track3D",
    "TrackOptimizer",
    "WindowProblem",
    "chain_tracks",
    "depth_metrics",
    "generate",
    "mask_metrics",
    "merge_masks",
    "optimize_depth",
    "optimize_track",
    "project",
    "read_sequence",
    "refine_sequence",
    "sigmoid_weight",
    "trajectory_metrics",
    "umeyama_align",
    "unproject",
    "write_outputs",
]
