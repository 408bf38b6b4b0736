"""Visibility detection: temporal support then view-frustum test.

Both stages test sliced Gaussian centers only; spatial extent does not enter.
The temporal stage keeps Gaussians whose temporal weight at the query time is
at least eps_t (inclusive). The view stage keeps centers whose camera-space
depth lies strictly inside (near, far) and whose projection falls inside the
image rectangle widened by a pixel margin, half-open on the high side.
"""

from __future__ import annotations

import numpy as np

from .camera import Camera
from .core4d import GaussianCloud, slice_mean, temporal_weight

DEFAULT_EPS_T = 0.05


def temporal_filter(cloud: GaussianCloud, t: float, eps_t: float = DEFAULT_EPS_T,
                    cov4: np.ndarray | None = None) -> np.ndarray:
    """Boolean mask of Gaussians with temporal weight >= eps_t at time t."""
    if cov4 is None:
        cov4 = cloud.cov4()
    w = temporal_weight(cov4, cloud.temporal_centers, t)
    return w >= eps_t


def view_filter(camera: Camera, means: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of 3D points visible from the camera.

    Depth must lie strictly inside (near, far); the projected center must fall
    in [-margin, width + margin) x [-margin, height + margin).
    """
    means = np.asarray(means, dtype=np.float64)
    cam = camera.to_camera(means)
    z = cam[..., 2]
    ok = (z > camera.near) & (z < camera.far)
    # Guard the division: points at or behind the camera plane are already out.
    safe_z = np.where(ok, z, 1.0)
    u = camera.fx * cam[..., 0] / safe_z + camera.cx
    v = camera.fy * cam[..., 1] / safe_z + camera.cy
    ok &= (u >= -margin) & (u < camera.width + margin)
    ok &= (v >= -margin) & (v < camera.height + margin)
    return ok


def visible_set(cloud: GaussianCloud, camera: Camera, t: float,
                eps_t: float = DEFAULT_EPS_T, margin: float = 0.0,
                cov4: np.ndarray | None = None) -> np.ndarray:
    """Sorted indices of Gaussians passing the temporal filter, then the view
    filter applied to their sliced centers at time t."""
    if cov4 is None:
        cov4 = cloud.cov4()
    mask = temporal_filter(cloud, t, eps_t, cov4=cov4)
    idx = np.nonzero(mask)[0]
    if idx.size:
        means = slice_mean(
            cov4[idx], cloud.positions[idx], cloud.temporal_centers[idx], t
        )
        idx = idx[view_filter(camera, means, margin)]
    return idx


def visible_mask(cloud: GaussianCloud, camera: Camera, t: float,
                 eps_t: float = DEFAULT_EPS_T, margin: float = 0.0,
                 cov4: np.ndarray | None = None) -> np.ndarray:
    mask = np.zeros(len(cloud), dtype=bool)
    mask[visible_set(cloud, camera, t, eps_t, margin, cov4=cov4)] = True
    return mask
