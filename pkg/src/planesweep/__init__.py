"""Multi-view plane-sweep depth estimation with pluggable matching descriptors."""

from .geometry import (CameraIntrinsics, Pose, InverseDepthGrid, EpipolarSample,
                       backproject, project, epipolar_samples, scale_intrinsics)
from .features import (FeatureMap, FeaturePyramid, rgb_features, sample_bilinear,
                       sample_bilinear_grad, load_feature_map, save_feature_map)
from .costvolume import (CostVolume, MatchDistribution, build_cost_volume,
                         softmax_distribution, expected_inverse_depth,
                         winner_take_all, cost_curve)
from .depthmap import DepthMap
from .metrics import DepthMetrics, evaluate
from .regularizer import RegularizerConfig, InverseDepthField, minimize_energy, lambda_sweep

__all__ = [
    "CameraIntrinsics", "Pose", "InverseDepthGrid", "EpipolarSample",
    "backproject", "project", "epipolar_samples", "scale_intrinsics",
    "FeatureMap", "FeaturePyramid", "rgb_features", "sample_bilinear",
    "sample_bilinear_grad", "load_feature_map", "save_feature_map",
    "CostVolume", "MatchDistribution", "build_cost_volume",
    "softmax_distribution", "expected_inverse_depth", "winner_take_all",
    "cost_curve", "DepthMap", "DepthMetrics", "evaluate",
    "RegularizerConfig", "InverseDepthField", "minimize_energy", "lambda_sweep",
]

__version__ = "0.1.0"
