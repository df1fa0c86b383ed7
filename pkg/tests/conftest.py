import numpy as np
import pytest

from dragsplat.cameras import Camera
from dragsplat.scene import make_scene


def random_scene(rng: np.random.Generator, n: int, extent: float = 1.0,
                 masked_fraction: float = 0.0):
    """Well-conditioned random scene: moderate opacities, interior colors."""
    positions = rng.uniform(-extent / 2, extent / 2, (n, 3))
    rotations = rng.normal(size=(n, 4))
    log_scales = rng.uniform(np.log(0.02 * extent), np.log(0.12 * extent), (n, 3))
    opacity_logits = rng.uniform(-1.0, 2.0, n)
    colors = rng.uniform(0.15, 0.85, (n, 3))
    mask = (rng.random(n) < masked_fraction).astype(np.uint8)
    return make_scene(positions, rotations, log_scales, opacity_logits,
                      colors, mask)


def look_at_camera(eye, target=(0.0, 0.0, 0.0), width=32, height=32,
                   focal=40.0, up=(0.0, 1.0, 0.0)):
    """World-to-camera pinhole looking from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    t = -R @ eye
    return Camera(fx=focal, fy=focal, cx=width / 2, cy=height / 2,
                  width=width, height=height, rotation=R, translation=t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def two_blob_scene(rng: np.random.Generator, n_per_blob=60, std=0.1,
                   centers=((-0.25, 0.0, 0.0), (0.25, 0.0, 0.0)),
                   log_scale=None, opacity=2.0):
    """Masked blob at centers[0], unmasked at centers[1]."""
    if log_scale is None:
        log_scale = np.log(0.035)
    pos_m = rng.normal(centers[0], std, (n_per_blob, 3))
    pos_u = rng.normal(centers[1], std, (n_per_blob, 3))
    n = 2 * n_per_blob
    positions = np.concatenate([pos_m, pos_u])
    rotations = rng.normal(size=(n, 4))
    log_scales = np.full((n, 3), log_scale) + rng.uniform(-0.2, 0.2, (n, 3))
    opacity_logits = np.full(n, float(opacity))
    colors = np.concatenate([
        np.tile([0.8, 0.3, 0.2], (n_per_blob, 1)),
        np.tile([0.2, 0.4, 0.8], (n_per_blob, 1)),
    ]) + rng.uniform(-0.05, 0.05, (n, 3))
    mask = np.concatenate([np.ones(n_per_blob), np.zeros(n_per_blob)])
    return make_scene(positions, rotations, log_scales, opacity_logits,
                      np.clip(colors, 0.05, 0.95), mask)


def ring_cameras(n=8, radius=2.2, width=32, height=32, focal_mult=1.4,
                 elevation=0.25):
    cams = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = [radius * np.sin(a), elevation * np.sin(2 * a),
               -radius * np.cos(a)]
        cams.append(look_at_camera(eye, width=width, height=height,
                                   focal=focal_mult * width))
    return cams
