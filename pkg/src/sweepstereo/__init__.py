"""Plane-sweep multi-view stereo with streamed non-local recurrent
cost-map regularization, classification depth inference, and dynamic
depth-map fusion, on a small self-contained autodiff tensor core."""

from .estimator import DepthMapEstimator
from .fusion import FusionConfig, PointCloud, dynamic_threshold, fuse
from .geometry import CameraView, DepthHypothesisSet, sample_inverse_depth
from .inference import (DepthEstimate, GroundTruthDepth, ProbabilityVolume,
                        TrainConfig, cross_entropy_loss, infer_depth,
                        probability_volume, train, wta_depth)
from .metrics import ReconMetrics, evaluate
from .network import DepthNetwork, NetworkConfig
from .params import ParameterStore
from .scenes import SceneSpec, SyntheticScene, generate_scene
from .tensor import Tensor, no_grad

__version__ = "0.1.0"

__all__ = [
    "CameraView",
    "DepthEstimate",
    "DepthHypothesisSet",
    "DepthMapEstimator",
    "DepthNetwork",
    "FusionConfig",
    "GroundTruthDepth",
    "NetworkConfig",
    "ParameterStore",
    "PointCloud",
    "ProbabilityVolume",
    "ReconMetrics",
    "SceneSpec",
    "SyntheticScene",
    "Tensor",
    "TrainConfig",
    "cross_entropy_loss",
    "dynamic_threshold",
    "evaluate",
    "fuse",
    "generate_scene",
    "infer_depth",
    "no_grad",
    "probability_volume",
    "sample_inverse_depth",
    "train",
    "wta_depth",
    "__version__",
]
