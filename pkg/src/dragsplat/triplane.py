"""Triplane deformation field: multi-resolution plane encoder and the
region-routed shift decoders.

Every Gaussian position is normalized into the scene box, bilinearly sampled
from three orthogonal feature planes at each resolution, the three samples
fused per scale by Hadamard product, concatenated across scales and passed
through a small MLP. Two decoder heads predict the 3-vector shift: masked
primitives use the first head directly; unmasked primitives get
stop-gradient(head1) plus head2(stop-gradient(feature)), so losses over
unmasked shifts can only train head2.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError
from .scene import GaussianScene

CHECKPOINT_VERSION = 1
_NORM_TINY = 1e-30  # guards the region-loss sqrt away from its kink at zero


def normalize_position(p: torch.Tensor, aabb: torch.Tensor) -> torch.Tensor:
    """Affine map of the box onto [-1, 1]^3; outside points are clamped."""
    lo, hi = aabb[0], aabb[1]
    out = 2.0 * (p - lo) / (hi - lo) - 1.0
    return torch.clamp(out, -1.0, 1.0)


def sample_plane(plane: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear sample of an (F, R, R) grid at uv in [-1, 1]^2 (align-corners).

    uv[:, 0] indexes the grid's last axis, uv[:, 1] the middle axis; values
    outside the range clamp to the border.
    """
    grid = uv.reshape(1, -1, 1, 2)
    out = F.grid_sample(plane.unsqueeze(0), grid, mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out[0, :, :, 0].transpose(0, 1)


def _mlp(sizes: list[int], zero_last: bool = False,
         generator=None) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(sizes) - 1):
        lin = nn.Linear(sizes[i], sizes[i + 1])
        if zero_last and i == len(sizes) - 2:
            nn.init.zeros_(lin.weight)
            nn.init.zeros_(lin.bias)
        elif generator is not None:
            # default Linear init distribution, drawn from our generator so
            # identical seeds build identical models
            bound = 1.0 / float(np.sqrt(sizes[i]))
            with torch.no_grad():
                lin.weight.uniform_(-bound, bound, generator=generator)
                lin.bias.uniform_(-bound, bound, generator=generator)
        layers.append(lin)
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class TriplaneDeformation(nn.Module):
    """Position -> shift field with masked/unmasked gradient routing."""

    def __init__(self, aabb, resolutions=(32, 64, 128), feature_dim=16,
                 hidden_dim=64, dtype=torch.float32, generator=None):
        super().__init__()
        self.resolutions = tuple(int(r) for r in resolutions)
        self.feature_dim = int(feature_dim)
        self.hidden_dim = int(hidden_dim)
        aabb = np.asarray(aabb, dtype=np.float64)
        if not (aabb[1] > aabb[0]).all():
            raise ConfigurationError("deformation aabb must be non-degenerate")
        self.register_buffer("aabb", torch.as_tensor(aabb, dtype=dtype))

        planes = []
        for r in self.resolutions:
            t = torch.empty(3, self.feature_dim, r, r, dtype=dtype)
            t.uniform_(-1e-4, 1e-4, generator=generator)
            planes.append(nn.Parameter(t))
        self.planes = nn.ParameterList(planes)

        fused_in = self.feature_dim * len(self.resolutions)
        self.fusion = _mlp([fused_in, hidden_dim, hidden_dim, hidden_dim],
                           generator=generator)
        self.head_masked = _mlp([hidden_dim, hidden_dim, hidden_dim, 3],
                                zero_last=True, generator=generator)
        self.head_unmasked = _mlp([hidden_dim, hidden_dim, hidden_dim, 3],
                                  zero_last=True, generator=generator)
        self.to(dtype)

    # plane + fusion parameters form the encoder optimizer group; the two
    # heads form the decoder group.
    def encoder_parameters(self):
        return list(self.planes.parameters()) + list(self.fusion.parameters())

    def decoder_parameters(self):
        return list(self.head_masked.parameters()) + list(self.head_unmasked.parameters())

    def encode(self, points: torch.Tensor) -> torch.Tensor:
        """(N, 3) world positions -> (N, hidden) fused feature."""
        norm = normalize_position(points, self.aabb)
        per_scale = []
        for plane in self.planes:
            f_xy = sample_plane(plane[0], norm[:, (0, 1)])
            f_xz = sample_plane(plane[1], norm[:, (0, 2)])
            f_yz = sample_plane(plane[2], norm[:, (1, 2)])
            per_scale.append(f_xy * f_xz * f_yz)
        stacked = torch.cat(per_scale, dim=1)
        if stacked.shape[1] != self.fusion[0].in_features:
            raise ConfigurationError(
                f"fusion expects {self.fusion[0].in_features} features, "
                f"got {stacked.shape[1]}")
        return self.fusion(stacked)

    def decode_shift(self, feature: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        """(N, hidden), (N,) bool -> (N, 3) shifts with routing.

        masked rows: head1(f), gradients reach head1/fusion/planes.
        unmasked rows: sg(head1(f)) + head2(sg(f)), gradients reach head2 only.
        """
        n1 = self.head_masked(feature)
        n2 = self.head_unmasked(feature.detach())
        masked = masked.reshape(-1, 1)
        return torch.where(masked, n1, n1.detach() + n2)

    def forward(self, points: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
        return self.decode_shift(self.encode(points), masked)


def deform_scene(scene: GaussianScene, model: TriplaneDeformation) -> np.ndarray:
    """Per-primitive shift array for a scene (inference only)."""
    dtype = model.aabb.dtype
    pts = torch.from_numpy(scene.positions).to(dtype)
    flags = torch.from_numpy(scene.mask.astype(bool))
    with torch.no_grad():
        shifts = model(pts, flags)
    return shifts.numpy()


def region_reg_loss(shifts: torch.Tensor, unmasked_idx) -> torch.Tensor:
    """Mean L2 norm of unmasked shifts; zero for an empty set."""
    if torch.is_tensor(unmasked_idx):
        idx = unmasked_idx
    else:
        idx = torch.as_tensor(np.asarray(unmasked_idx), dtype=torch.long)
    if idx.numel() == 0:
        return shifts.new_zeros(())
    sq = (shifts[idx] ** 2).sum(dim=1)
    # exact zero (with zero gradient) for zero shifts, exact norm elsewhere
    norms = torch.where(sq > 0, torch.sqrt(sq + _NORM_TINY), sq)
    return norms.mean()


def model_backward(model: TriplaneDeformation, points: torch.Tensor,
                   masked: torch.Tensor, upstream: torch.Tensor):
    """Gradients of sum(upstream * shifts) for every parameter group.

    Returns {"planes": [...], "fusion": [...], "head_masked": [...],
    "head_unmasked": [...]} with zeros where no gradient flows.
    """
    shifts = model(points, masked)
    groups = {
        "planes": list(model.planes.parameters()),
        "fusion": list(model.fusion.parameters()),
        "head_masked": list(model.head_masked.parameters()),
        "head_unmasked": list(model.head_unmasked.parameters()),
    }
    params = [p for ps in groups.values() for p in ps]
    grads = torch.autograd.grad(shifts, params, grad_outputs=upstream,
                                allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g
             for p, g in zip(params, grads)]
    out = {}
    k = 0
    for name, ps in groups.items():
        out[name] = grads[k:k + len(ps)]
        k += len(ps)
    return out


def save_checkpoint(model: TriplaneDeformation, path) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "resolutions": model.resolutions,
        "feature_dim": model.feature_dim,
        "hidden_dim": model.hidden_dim,
        "aabb": model.aabb.numpy(),
        "state": model.state_dict(),
    }, path)


def load_checkpoint(path) -> TriplaneDeformation:
    blob = torch.load(path, weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {blob.get('version')}")
    model = TriplaneDeformation(blob["aabb"], blob["resolutions"],
                                blob["feature_dim"], blob["hidden_dim"])
    model.load_state_dict(blob["state"])
    return model
