"""Near-light photometric stereo for vision-based tactile sensors.

Synthetic rendering, a log-depth alternating least-squares solver, calibration
dataset construction, a per-pixel normal network and evaluation metrics.
"""

from .errors import NearlightError
from .scene import (
    AlbedoMap,
    CameraModel,
    CaptureSet,
    DepthMap,
    LightSource,
    LogDepthMap,
    NormalMap,
    SurfaceState,
)

__version__ = "0.1.0"

__all__ = [
    "AlbedoMap",
    "CameraModel",
    "CaptureSet",
    "DepthMap",
    "LightSource",
    "LogDepthMap",
    "NearlightError",
    "NormalMap",
    "SurfaceState",
]
