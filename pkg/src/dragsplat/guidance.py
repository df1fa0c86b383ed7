"""Diffusion-side machinery for score-distillation guidance.

Covers the noise schedule with cosine timestep annealing and inverse-square
CFG annealing, the deterministic latent codec (8x average pool / bilinear
upsample), composite-noise assembly, the distillation loss terms, a learnable
source estimator, and a synthetic oracle that stands in for an external
drag-diffusion model at desk scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, StateError

T_MAX_FRACTION = 0.98
T_MIN_FRACTION = 0.02
CFG_MAX = 4.0
LATENT_FACTOR = 8


def _clamped_ratio(s: float) -> float:
    if s < 0.0 or s > 1.0:
        warnings.warn(f"epoch ratio {s} outside [0, 1]; clamping", stacklevel=3)
        return min(1.0, max(0.0, s))
    return s


def timestep_schedule(s: float) -> float:
    """Cosine-annealed timestep fraction: 0.98 at s=0 down to 0.02 at s=1."""
    s = _clamped_ratio(s)
    u = 0.5 * (1.0 + math.cos(math.pi * s))
    # Convex combination keeps both endpoints exact in floating point.
    return u * T_MAX_FRACTION + (1.0 - u) * T_MIN_FRACTION


def cfg_scale(s: float, cfg_max: float = CFG_MAX) -> float:
    """Inverse-square annealed guidance scale: cfg_max at s=0 down to 1."""
    s = _clamped_ratio(s)
    return (cfg_max - 1.0) * (1.0 - s) ** 2 + 1.0


class DiffusionSchedule:
    """Linear-beta discretization with cumulative alpha products."""

    def __init__(self, steps: int = 1000, beta_start: float = 1e-4,
                 beta_end: float = 2e-2):
        self.steps = steps
        self.betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        self.alpha_bars = np.cumprod(1.0 - self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product for discrete step t in [1, steps]."""
        t = min(self.steps, max(1, int(t)))
        return float(self.alpha_bars[t - 1])

    def weight(self, t: int) -> float:
        # Uniform w(t); the sqrt(abar)/sqrt(1-abar) factor stays explicit in the losses.
        return 1.0

    def step_for_ratio(self, s: float) -> int:
        """Nearest discrete step for the annealed fraction at epoch ratio s."""
        return min(self.steps, max(1, int(round(timestep_schedule(s) * self.steps))))


def add_noise(z, alpha_bar: float, eps):
    """Forward diffusion: sqrt(abar) * z + sqrt(1 - abar) * eps."""
    return math.sqrt(alpha_bar) * z + math.sqrt(1.0 - alpha_bar) * eps


def denoised_estimate(z_t, eps_hat, alpha_bar: float):
    """(z_t - sqrt(1 - abar) * eps_hat) / sqrt(abar)."""
    if alpha_bar <= 0:
        raise ValueError("alpha_bar must be positive")
    return (z_t - math.sqrt(1.0 - alpha_bar) * eps_hat) / math.sqrt(alpha_bar)


def composite_noise(eps_tgt, eps_src, eps):
    """eps_tgt - eps_src + eps, elementwise."""
    return eps_tgt - eps_src + eps


def guidance_correction(z, eps_tgt, eps_src, alpha_bar: float):
    """Denoised latent in clean-latent form:
    z - sqrt(1-abar)/sqrt(abar) * (eps_tgt - eps_src).

    Algebraically identical to denoised_estimate(add_noise(z, abar, eps),
    composite_noise(eps_tgt, eps_src, eps), abar) but cancels bit-exactly
    when eps_tgt == eps_src, so a converged edit sees exactly zero gradient
    instead of float debris (which Adam would amplify to full-size steps).
    """
    scale = math.sqrt(1.0 - alpha_bar) / math.sqrt(alpha_bar)
    return z - scale * (eps_tgt - eps_src)


class LatentCodec:
    """Linear stand-in for a VAE: 8x8 average pooling down, bilinear up.

    Both maps are linear; encode(decode(z)) is exact wherever decode output is
    blockwise constant (in particular for constant z).
    """

    factor = LATENT_FACTOR

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        H, W, C = image.shape
        f = self.factor
        if H % f or W % f:
            raise ConfigurationError(f"image size {H}x{W} not divisible by {f}")
        return image.reshape(H // f, f, W // f, f, C).mean(dim=(1, 3))

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        chw = latent.permute(2, 0, 1).unsqueeze(0)
        up = F.interpolate(chw, scale_factor=self.factor, mode="bilinear",
                           align_corners=False)
        return up[0].permute(1, 2, 0)

    def latent_shape(self, height: int, width: int, channels: int = 3):
        return (height // self.factor, width // self.factor, channels)


@dataclass
class GuidanceRequest:
    """Inputs any noise-prediction oracle needs for one view."""

    image: np.ndarray        # (H, W, 3) current render
    init_image: np.ndarray   # (H, W, 3) render of the mirrored scene
    mask: np.ndarray         # (H, W) dilated 2D edit mask
    points: list             # [{"handle": [u, v], "target": [u, v]}, ...]
    t: int                   # discrete diffusion step
    alpha_bar: float
    noise: np.ndarray        # latent-shaped sample used for this view/iteration
    cfg: float               # annealed guidance scale for the target branch
    seed: int

    def __post_init__(self):
        if self.image.shape != self.init_image.shape:
            raise StateError("image and init_image shapes differ")
        if self.mask.shape != self.image.shape[:2]:
            raise StateError("mask does not match image dimensions")


@dataclass
class GuidanceResponse:
    eps_tgt: np.ndarray
    eps_src: np.ndarray

    def validate_shape(self, latent_shape) -> None:
        from .errors import GuidanceUnavailableError
        for name, arr in (("eps_tgt", self.eps_tgt), ("eps_src", self.eps_src)):
            if tuple(arr.shape) != tuple(latent_shape):
                raise GuidanceUnavailableError(
                    f"{name} shape {tuple(arr.shape)} != latent {tuple(latent_shape)}")


class SourceEstimator(nn.Module):
    """Learnable predictor of the current render distribution.

    The belief about each camera's clean latent is an anchored base (the
    initial render latent, a fixed buffer) plus a per-camera learnable offset
    plus a shared zero-initialized embedding. Noise prediction inverts the
    forward-diffusion formula against that belief.
    """

    def __init__(self, n_cameras: int, latent_shape, dtype=torch.float32):
        super().__init__()
        shape = (n_cameras, *latent_shape)
        self.register_buffer("base", torch.zeros(shape, dtype=dtype))
        self.offsets = nn.Parameter(torch.zeros(shape, dtype=dtype))
        self.y_null = nn.Parameter(torch.zeros(latent_shape, dtype=dtype))

    def set_base(self, camera_index: int, latent: torch.Tensor) -> None:
        with torch.no_grad():
            self.base[camera_index] = latent

    def predict_latent(self, camera_index: int) -> torch.Tensor:
        return self.base[camera_index] + self.offsets[camera_index] + self.y_null

    def predict_noise(self, z_t: torch.Tensor, alpha_bar: float,
                      camera_index: int) -> torch.Tensor:
        mu = self.predict_latent(camera_index)
        return (z_t - math.sqrt(alpha_bar) * mu) / math.sqrt(1.0 - alpha_bar)


def source_estimator_loss(estimator: SourceEstimator, z_t: torch.Tensor,
                          alpha_bar: float, eps: torch.Tensor,
                          camera_index: int) -> torch.Tensor:
    """Mean-square diffusion loss; gradients reach estimator parameters only."""
    pred = estimator.predict_noise(z_t.detach(), alpha_bar, camera_index)
    return ((pred - eps.detach()) ** 2).mean()


def source_estimator_residual_loss(estimator: SourceEstimator, z: torch.Tensor,
                                   alpha_bar: float,
                                   camera_index: int) -> torch.Tensor:
    """source_estimator_loss in clean-latent form.

    Identical value and gradients (the noise terms of prediction and target
    cancel algebraically), but exactly zero when the belief matches the
    current latent, avoiding optimizer drift at convergence.
    """
    mu = estimator.predict_latent(camera_index)
    scale = math.sqrt(alpha_bar) / math.sqrt(1.0 - alpha_bar)
    return ((scale * (z.detach() - mu)) ** 2).mean()


def drag_sds_losses(z: torch.Tensor, x: torch.Tensor, z_hat: torch.Tensor,
                    x_hat: torch.Tensor, alpha_bar: float, w: float = 1.0):
    """Latent- and image-space distillation terms.

    Both use w(t) * sqrt(abar)/sqrt(1-abar) times a squared L2 norm; the
    denoised targets are constants (detached), so gradients land on z and x.
    """
    if z.shape != z_hat.shape:
        raise StateError(f"latent shapes differ: {tuple(z.shape)} vs {tuple(z_hat.shape)}")
    if x.shape != x_hat.shape:
        raise StateError(f"image shapes differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    k = w * math.sqrt(alpha_bar) / math.sqrt(1.0 - alpha_bar)
    loss_lat = k * ((z - z_hat.detach()) ** 2).sum()
    loss_img = k * ((x - x_hat.detach()) ** 2).sum()
    return loss_lat, loss_img


class SyntheticOracle:
    """Ground-truth-backed guidance for desk-scale verification.

    Given a target render per camera, the conditional branch predicts the
    noise that would denoise the current latent toward the target; the
    unconditional branch anchors at the current render. CFG scales their
    difference on the target branch only; the source branch comes from the
    estimator when one is attached, else from the exact unconditional noise.
    """

    def __init__(self, target_images: dict[int, np.ndarray],
                 codec: LatentCodec | None = None,
                 estimator: SourceEstimator | None = None,
                 dtype=torch.float32):
        self.codec = codec or LatentCodec()
        self.estimator = estimator
        self.dtype = dtype
        self._targets: dict[int, torch.Tensor] = {}
        for cam, img in target_images.items():
            self._targets[cam] = self.codec.encode(
                torch.as_tensor(np.asarray(img)).to(dtype))

    @classmethod
    def from_scene(cls, target_scene, cameras, estimator=None,
                   background: float = 0.0, dtype=torch.float32):
        from .render import render
        images = {i: render(target_scene, None, cam, background).rgb
                  for i, cam in enumerate(cameras)}
        return cls(images, estimator=estimator, dtype=dtype)

    def respond(self, request: GuidanceRequest, camera_index: int) -> GuidanceResponse:
        if camera_index not in self._targets:
            raise ConfigurationError(f"no target render for camera {camera_index}")
        # Everything below sticks to one dtype and one expression shape so
        # that identical inputs cancel bit-exactly (target == current render
        # gives eps_tgt == eps_src == eps_uncond, hence a true fixed point).
        z_tgt = self._targets[camera_index]
        z_cur = self.codec.encode(torch.as_tensor(request.image).to(self.dtype))
        eps = torch.as_tensor(request.noise).to(self.dtype)
        abar = request.alpha_bar
        z_t = add_noise(z_cur, abar, eps)
        root = math.sqrt(1.0 - abar)
        eps_cond = (z_t - math.sqrt(abar) * z_tgt) / root
        eps_uncond = (z_t - math.sqrt(abar) * z_cur) / root
        eps_tgt = request.cfg * (eps_cond - eps_uncond) + eps_uncond
        if self.estimator is not None:
            with torch.no_grad():
                eps_src = self.estimator.predict_noise(
                    z_t.to(self.estimator.offsets.dtype), abar, camera_index)
            eps_src = eps_src.to(self.dtype)
        else:
            eps_src = eps_uncond
        return GuidanceResponse(eps_tgt=eps_tgt.numpy(), eps_src=eps_src.numpy())
