"""Pinhole camera model.

World-to-camera is a 3x4 rigid transform; the camera looks along +z in its
own frame, x runs with pixel columns and y with pixel rows. Pixel (i, j)
samples at center (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCameraError


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray  # (3, 4)
    near: float
    far: float
    cam_id: int = field(default=-1)

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (3, 4):
            raise InvalidCameraError("world_to_camera must be 3x4")
        if not np.all(np.isfinite(w2c)):
            raise InvalidCameraError("world_to_camera must be finite")
        r = w2c[:, :3]
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-8:
            raise InvalidCameraError("rotation block is not orthonormal")
        if np.linalg.det(r) < 0.0:
            raise InvalidCameraError("rotation block must have determinant +1")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidCameraError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise InvalidCameraError("image dimensions must be positive")
        if not (0.0 < self.near < self.far):
            raise InvalidCameraError("require 0 < near < far")
        object.__setattr__(self, "world_to_camera", w2c)

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def project_points(self, points: np.ndarray):
        """Pixel coordinates and depths for world points (..., 3).

        Callers must handle points at or behind the camera plane themselves:
        depths are returned unfiltered.
        """
        cam = self.to_camera(points)
        z = cam[..., 2]
        u = self.fx * cam[..., 0] / z + self.cx
        v = self.fy * cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "world_to_camera": self.world_to_camera.tolist(),
            "near": self.near,
            "far": self.far,
            "cam_id": self.cam_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            world_to_camera=np.array(d["world_to_camera"], dtype=np.float64),
            near=float(d["near"]),
            far=float(d["far"]),
            cam_id=int(d.get("cam_id", -1)),
        )


def look_at(position, target, up, fx, fy, cx, cy, width, height, near, far,
            cam_id: int = -1) -> Camera:
    """Camera at `position` looking toward `target`.

    The camera x axis is chosen perpendicular to both the viewing direction
    and the world `up` hint.
    """
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - position
    fnorm = np.linalg.norm(forward)
    if fnorm == 0.0:
        raise InvalidCameraError("camera position coincides with target")
    forward = forward / fnorm
    x_axis = np.cross(forward, up)
    xnorm = np.linalg.norm(x_axis)
    if xnorm < 1e-12:
        raise InvalidCameraError("up vector is parallel to the viewing direction")
    x_axis = x_axis / xnorm
    y_axis = np.cross(forward, x_axis)
    r = np.stack([x_axis, y_axis, forward])
    t = -r @ position
    w2c = np.concatenate([r, t[:, None]], axis=1)
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height,
                  world_to_camera=w2c, near=near, far=far, cam_id=cam_id)


def fov_to_focal(fov_deg: float, size_px: int) -> float:
    """Focal length in pixels for a full field of view in degrees."""
    return size_px / (2.0 * math.tan(math.radians(fov_deg) / 2.0))
