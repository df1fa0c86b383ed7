"""Pinhole cameras, point/Gaussian projection, camera JSON IO.

Conventions: world-to-camera is x_cam = R @ x_world + t with z forward;
pixel (row i, col j) has continuous center (u, v) = (j + 0.5, i + 0.5).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, ConfigurationError

# Isotropic variance floor (px^2) added to projected 2D covariances so
# sub-pixel Gaussians stay invertible.
COV2D_FLOOR = 0.3


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray     # (3, 3) world-to-camera, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigurationError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigurationError("image size must be at least 1x1")
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ConfigurationError("rotation must be 3x3")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-5):
            raise ConfigurationError("rotation must be orthonormal")
        if np.linalg.det(R) < 0:
            raise ConfigurationError("rotation must have determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=np.float64).reshape(3))

    def scaled(self, width: int) -> "Camera":
        """Same view at a different render width (aspect preserved)."""
        f = width / self.width
        return Camera(self.fx * f, self.fy * f, self.cx * f, self.cy * f,
                      int(round(self.width * f)), int(round(self.height * f)),
                      self.rotation, self.translation)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
        }

    @staticmethod
    def from_json(obj: dict) -> "Camera":
        return Camera(
            fx=float(obj["fx"]), fy=float(obj["fy"]),
            cx=float(obj["cx"]), cy=float(obj["cy"]),
            width=int(obj["width"]), height=int(obj["height"]),
            rotation=np.asarray(obj["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(obj["translation"], dtype=np.float64),
        )


def load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        doc = json.load(fh)
    items = doc["cameras"] if isinstance(doc, dict) else doc
    return [Camera.from_json(item) for item in items]


def save_cameras(cameras: list[Camera], path) -> None:
    with open(path, "w") as fh:
        json.dump({"cameras": [c.to_json() for c in cameras]}, fh, indent=1)


def project_point(camera: Camera, p) -> tuple[float, float, float]:
    """(u, v, depth) of a world point; raises BehindCameraError for depth <= 0."""
    p_cam = camera.rotation @ np.asarray(p, dtype=np.float64) + camera.translation
    depth = float(p_cam[2])
    if depth <= 0:
        raise BehindCameraError(f"point has non-positive depth {depth}")
    u = camera.cx + camera.fx * p_cam[0] / depth
    v = camera.cy + camera.fy * p_cam[1] / depth
    return float(u), float(v), depth


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """(..., 4) normalized quaternion (w, x, y, z) -> (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def project_gaussian(camera: Camera, primitive, shifted_position=None):
    """EWA projection of one primitive: (mean2d (2,), cov2d (2,2), depth).

    cov2d = J W Sigma W^T J^T + floor, with J the first-order projection
    Jacobian at the (shifted) mean. Raises BehindCameraError when behind.
    """
    p = np.asarray(primitive.position if shifted_position is None
                   else shifted_position, dtype=np.float64)
    W = camera.rotation
    p_cam = W @ p + camera.translation
    depth = float(p_cam[2])
    if depth <= 0:
        raise BehindCameraError(f"gaussian has non-positive depth {depth}")
    u = camera.cx + camera.fx * p_cam[0] / depth
    v = camera.cy + camera.fy * p_cam[1] / depth

    Rq = quaternion_to_rotation(primitive.rotation)
    s2 = np.exp(2.0 * np.asarray(primitive.log_scale, dtype=np.float64))
    sigma = Rq @ np.diag(s2) @ Rq.T
    J = np.array([
        [camera.fx / depth, 0.0, -camera.fx * p_cam[0] / depth ** 2],
        [0.0, camera.fy / depth, -camera.fy * p_cam[1] / depth ** 2],
    ])
    cov2d = J @ W @ sigma @ W.T @ J.T + COV2D_FLOOR * np.eye(2)
    return np.array([u, v]), cov2d, depth
