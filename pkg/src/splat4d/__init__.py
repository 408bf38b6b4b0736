"""splat4d: sparse-camera 4D Gaussian splatting with learned opacity decay."""

__version__ = "0.1.0"

from .appearance import ShConfig, ViewDirection
from .camera import Camera
from .core4d import Covariance4, Gaussian4D, GaussianCloud
from .raster import RasterConfig, RenderOutput, oracle_render, render_backward, render_forward

__all__ = [
    "Camera",
    "Covariance4",
    "Gaussian4D",
    "GaussianCloud",
    "RasterConfig",
    "RenderOutput",
    "ShConfig",
    "ViewDirection",
    "oracle_render",
    "render_backward",
    "render_forward",
    "__version__",
]
