"""Sparse-view 3D reconstruction toolkit.

Depth-fusion Gaussian initialization, a differentiable splatting renderer,
and a two-stage optimization loop driven by pluggable repair/inpaint oracles.
"""

__version__ = "0.1.0"

from .errors import (
    AlignmentError,
    DatasetError,
    EvaluationError,
    FusionError,
    GeometryError,
    OptimizationError,
    OracleError,
    OracleProtocolError,
    OracleUnavailableError,
    PathFitError,
    PipelineOrderError,
    SparseViewError,
)
from .scene import (
    BinaryMask,
    Camera,
    ConfidenceMap,
    DepthMap,
    GaussianCloud,
    ImageRGB,
    SceneDataset,
    View,
    project_point,
    unproject_pixel,
)

__all__ = [
    "AlignmentError",
    "BinaryMask",
    "Camera",
    "ConfidenceMap",
    "DatasetError",
    "DepthMap",
    "EvaluationError",
    "FusionError",
    "GaussianCloud",
    "GeometryError",
    "ImageRGB",
    "OptimizationError",
    "OracleError",
    "OracleProtocolError",
    "OracleUnavailableError",
    "PathFitError",
    "PipelineOrderError",
    "SceneDataset",
    "SparseViewError",
    "View",
    "project_point",
    "unproject_pixel",
]
