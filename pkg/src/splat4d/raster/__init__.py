from .splatting import (
    GradientBundle,
    RasterConfig,
    RenderOutput,
    depth_order,
    oracle_render,
    position_hash,
    project,
    project_backward,
    render_backward,
    render_forward,
)
from . import kernels

__all__ = [
    "GradientBundle",
    "RasterConfig",
    "RenderOutput",
    "depth_order",
    "kernels",
    "oracle_render",
    "position_hash",
    "project",
    "project_backward",
    "render_backward",
    "render_forward",
]
