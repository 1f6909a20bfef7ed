"""Mesh-bound Gaussian splat avatars.

Pipeline: keypoint gap repair (kinematics) -> articulated pose fitting
(fitting) -> splat initialization and deformation (binding) -> splat training
(training) -> rendering (render / raster), with asset formats and a CLI in
assets / cli and an HTTP bridge for the web viewer in server.
"""

__version__ = "0.1.0"

from .types import (
    Camera,
    KeypointSequence,
    LossWeights,
    PolygonFrame,
    PolygonFrameSet,
    PoseParams,
    SkinnedMesh,
    Splat,
    SplatSet,
    WorldGaussians,
    validate_asset,
)

__all__ = [
    "__version__",
    "Camera",
    "KeypointSequence",
    "LossWeights",
    "PolygonFrame",
    "PolygonFrameSet",
    "PoseParams",
    "SkinnedMesh",
    "Splat",
    "SplatSet",
    "WorldGaussians",
    "validate_asset",
]
