"""Differentiable CPU splatting renderer.

Primitives are projected to 2D Gaussians (EWA first-order Jacobian), depth
sorted front-to-back (stable, so equal depths break ties by primitive index)
and alpha-composited densely per pixel. The whole chain is expressed in torch
ops, so reverse-mode gradients are exact for every parameter, including the
projected covariance and the quaternion normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .cameras import COV2D_FLOOR, Camera
from .errors import StateError
from .scene import GaussianScene, MirroredScene

# Pixels with accumulated weight below this are treated as background for
# depth picking.
_ALPHA_EPS = 1e-6

_CHUNK_ROWS = 256
# keeps log1p finite; only binds for opacity logits beyond ~13.8
_ALPHA_CEILING = 1.0 - 1e-6
# compile the chunk math for scenes big enough to amortize the one-time cost
_COMPILE_MIN_PRIMS = 512
_compiled_math = None


def _chunk_forward_math(u, v, ia, ib, ic, opac, col, px, py, carry, rgb_acc,
                        alpha_acc):
    dx = px.unsqueeze(0) - u.unsqueeze(1)
    dy = py.unsqueeze(0) - v.unsqueeze(1)
    power = -0.5 * (ia[:, None] * dx * dx + 2.0 * ib[:, None] * dx * dy
                    + ic[:, None] * dy * dy)
    g = torch.exp(power)
    alpha = (opac[:, None] * g).clamp(max=_ALPHA_CEILING)
    log_keep = torch.cumsum(torch.log1p(-alpha), dim=0)
    t_pre = torch.exp(log_keep - torch.log1p(-alpha))  # exclusive prefix
    keep = torch.exp(log_keep[-1])
    w = alpha * (carry.unsqueeze(0) * t_pre)
    rgb_out = rgb_acc + w.T @ col
    alpha_out = alpha_acc + w.sum(dim=0)
    carry_out = carry * keep
    return rgb_out, alpha_out, carry_out, g, alpha, t_pre, keep


def _chunk_backward_math(u, v, ia, ib, ic, opac, col, px, py, carry,
                         g, alpha, t_pre, keep, carry_out,
                         grad_rgb, grad_alpha, grad_carry_out):
    dx = px.unsqueeze(0) - u.unsqueeze(1)
    dy = py.unsqueeze(0) - v.unsqueeze(1)
    t_full = carry.unsqueeze(0) * t_pre
    w = alpha * t_full

    # direct gradient on each composited weight
    q = col @ grad_rgb.T + grad_alpha.unsqueeze(0)
    grad_col = w @ grad_rgb

    # suffix-sum identity: raising alpha_i discounts everything behind it
    cw = w * q
    suffix = cw.sum(dim=0, keepdim=True) - torch.cumsum(cw, dim=0)
    d_alpha = t_full * q - (suffix + (carry_out * grad_carry_out
                                      ).unsqueeze(0)) / (1.0 - alpha)

    unclamped = (opac.unsqueeze(1) * g) < _ALPHA_CEILING
    d_alpha_raw = d_alpha * unclamped
    grad_opac = (d_alpha_raw * g).sum(dim=1)
    d_power = d_alpha_raw * alpha  # alpha == op * g where unclamped
    grad_u = (d_power * (ia[:, None] * dx + ib[:, None] * dy)).sum(dim=1)
    grad_v = (d_power * (ib[:, None] * dx + ic[:, None] * dy)).sum(dim=1)
    grad_ia = -0.5 * (d_power * dx * dx).sum(dim=1)
    grad_ib = -(d_power * dx * dy).sum(dim=1)
    grad_ic = -0.5 * (d_power * dy * dy).sum(dim=1)
    grad_carry = (alpha * t_pre * q).sum(dim=0) + keep * grad_carry_out
    return (grad_u, grad_v, grad_ia, grad_ib, grad_ic, grad_opac, grad_col,
            grad_carry)


def _get_compiled_math():
    global _compiled_math
    if _compiled_math is None:
        try:
            import torch._dynamo
            torch._dynamo.config.cache_size_limit = max(
                64, torch._dynamo.config.cache_size_limit)
            _compiled_math = (torch.compile(_chunk_forward_math, dynamic=False),
                              torch.compile(_chunk_backward_math, dynamic=False))
        except Exception:
            _compiled_math = (_chunk_forward_math, _chunk_backward_math)
    return _compiled_math


class _CompositeChunk(torch.autograd.Function):
    """Front-to-back compositing over one gaussian chunk with a hand-written
    backward.

    The chain per pixel p and depth-ordered gaussian i is
        alpha_ip = min(op_i * exp(power_ip), ceiling)
        T_ip     = carry_p * prod_{j<i} (1 - alpha_jp)
        w_ip     = alpha_ip * T_ip
    with w accumulated into color/alpha and the transmittance product into
    the carry. One suffix cumsum yields every parameter gradient in a single
    pass, which beats replaying the traced chain per input; the math runs
    through torch.compile for large chunks (elementwise fusion).
    """

    @staticmethod
    def forward(ctx, u, v, ia, ib, ic, opac, col, px, py, carry, rgb_acc,
                alpha_acc, compiled):
        fwd = _get_compiled_math()[0] if compiled else _chunk_forward_math
        rgb_out, alpha_out, carry_out, g, alpha, t_pre, keep = fwd(
            u, v, ia, ib, ic, opac, col, px, py, carry, rgb_acc, alpha_acc)
        ctx.compiled = compiled
        ctx.save_for_backward(u, v, ia, ib, ic, opac, col, px, py, carry,
                              g, alpha, t_pre, keep, carry_out)
        return rgb_out, alpha_out, carry_out

    @staticmethod
    def backward(ctx, grad_rgb, grad_alpha, grad_carry_out):
        bwd = _get_compiled_math()[1] if ctx.compiled else _chunk_backward_math
        grads = bwd(*ctx.saved_tensors, grad_rgb.contiguous(),
                    grad_alpha.contiguous(), grad_carry_out.contiguous())
        (grad_u, grad_v, grad_ia, grad_ib, grad_ic, grad_opac, grad_col,
         grad_carry) = grads
        return (grad_u, grad_v, grad_ia, grad_ib, grad_ic, grad_opac,
                grad_col, None, None, grad_carry, grad_rgb, grad_alpha, None)


def _composite_chunk(u, v, ia, ib, ic, opac, col, px, py, carry, rgb_acc,
                     alpha_acc, compiled=False):
    return _CompositeChunk.apply(u, v, ia, ib, ic, opac, col, px, py, carry,
                                 rgb_acc, alpha_acc, compiled)


@dataclass
class RenderOutput:
    rgb: np.ndarray            # (H, W, 3) in [0, 1]
    alpha: np.ndarray          # (H, W) in [0, 1]
    depth: np.ndarray | None = None  # (H, W) world units, 0 where alpha ~ 0


def quat_to_rotmat_torch(q: torch.Tensor) -> torch.Tensor:
    """(N, 4) raw quaternion -> (N, 3, 3); normalization stays in the graph."""
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1)
    return torch.stack([row0, row1, row2], -2)


def splat_render(positions: torch.Tensor, rotations: torch.Tensor,
                 log_scales: torch.Tensor, opacity_logits: torch.Tensor,
                 colors: torch.Tensor, camera: Camera,
                 background: torch.Tensor | float = 0.0,
                 want_depth: bool = False,
                 chunk_elems: int = 500_000):
    """Core differentiable render. colors may have any channel count C.

    Returns (rgb (H, W, C), alpha (H, W), depth (H, W) or None).
    """
    dtype = positions.dtype
    H, W = camera.height, camera.width
    P = H * W
    C = colors.shape[1]
    dev = positions.device

    bg = background if torch.is_tensor(background) else torch.as_tensor(
        background, dtype=dtype, device=dev)
    bg = bg.reshape(-1).expand(C) if bg.ndim <= 1 else bg

    Rw = torch.as_tensor(camera.rotation, dtype=dtype, device=dev)
    tw = torch.as_tensor(camera.translation, dtype=dtype, device=dev)
    p_cam = positions @ Rw.T + tw
    zc = p_cam[:, 2]
    visible = zc > 1e-8

    if not bool(visible.any()):
        rgb = bg.expand(P, C).reshape(H, W, C).clone()
        alpha = torch.zeros(H, W, dtype=dtype, device=dev)
        depth = torch.zeros(H, W, dtype=dtype, device=dev) if want_depth else None
        return rgb, alpha, depth

    idx = torch.nonzero(visible, as_tuple=False).squeeze(1)
    p_cam = p_cam[idx]
    zc = p_cam[:, 2]
    u = camera.cx + camera.fx * p_cam[:, 0] / zc
    v = camera.cy + camera.fy * p_cam[:, 1] / zc

    Rq = quat_to_rotmat_torch(rotations[idx])
    s2 = torch.exp(2.0 * log_scales[idx])
    # Sigma = R diag(s^2) R^T rotated into camera frame.
    M = Rq * s2.unsqueeze(1)           # R @ diag(s^2)
    sigma = M @ Rq.transpose(1, 2)
    sigma_cam = Rw @ sigma @ Rw.T

    n = idx.shape[0]
    J = torch.zeros(n, 2, 3, dtype=dtype, device=dev)
    J[:, 0, 0] = camera.fx / zc
    J[:, 0, 2] = -camera.fx * p_cam[:, 0] / zc ** 2
    J[:, 1, 1] = camera.fy / zc
    J[:, 1, 2] = -camera.fy * p_cam[:, 1] / zc ** 2
    cov2d = J @ sigma_cam @ J.transpose(1, 2)
    a = cov2d[:, 0, 0] + COV2D_FLOOR
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + COV2D_FLOOR
    det = a * c - b * b
    ia, ib, ic = c / det, -b / det, a / det

    opac = torch.sigmoid(opacity_logits[idx])
    col = torch.clamp(colors[idx], 0.0, 1.0)

    # Canonical front-to-back order: depth with index tie-break (stable sort
    # over the visibility-filtered sequence preserves primitive order).
    order = torch.argsort(zc, stable=True)
    u, v, zc = u[order], v[order], zc[order]
    ia, ib, ic = ia[order], ib[order], ic[order]
    opac, col = opac[order], col[order]

    jj, ii = torch.meshgrid(torch.arange(W, dtype=dtype, device=dev),
                            torch.arange(H, dtype=dtype, device=dev),
                            indexing="xy")
    px = (jj + 0.5).reshape(-1)
    py = (ii + 0.5).reshape(-1)

    rgb_acc = torch.zeros(P, C, dtype=dtype, device=dev)
    alpha_acc = torch.zeros(P, dtype=dtype, device=dev)
    depth_acc = torch.zeros(P, dtype=dtype, device=dev) if want_depth else None
    carry = torch.ones(P, dtype=dtype, device=dev)

    compiled = n >= _COMPILE_MIN_PRIMS and dtype == torch.float32
    if compiled:
        # pad with zero-opacity rows so every chunk has an identical shape
        # (one compiled variant per pixel count); padding is exact: alpha=0
        # contributes nothing and leaves the transmittance untouched
        step = _CHUNK_ROWS
        pad = (-n) % step
        if pad:
            zeros = torch.zeros(pad, dtype=dtype, device=dev)
            ones = torch.ones(pad, dtype=dtype, device=dev)
            u = torch.cat([u, zeros])
            v = torch.cat([v, zeros])
            ia = torch.cat([ia, ones])
            ib = torch.cat([ib, zeros])
            ic = torch.cat([ic, ones])
            opac = torch.cat([opac, zeros])
            col = torch.cat([col, torch.zeros(pad, C, dtype=dtype, device=dev)])
        total = n + pad
    else:
        step = max(1, chunk_elems // P)
        total = n
    for start in range(0, total, step):
        end = min(total, start + step)
        rgb_acc, alpha_acc, new_carry = _composite_chunk(
            u[start:end], v[start:end], ia[start:end], ib[start:end],
            ic[start:end], opac[start:end], col[start:end], px, py,
            carry, rgb_acc, alpha_acc, compiled)
        if want_depth:
            with torch.no_grad():
                dx = px.unsqueeze(0) - u[start:end].unsqueeze(1)
                dy = py.unsqueeze(0) - v[start:end].unsqueeze(1)
                power = -0.5 * (ia[start:end, None] * dx * dx
                                + 2.0 * ib[start:end, None] * dx * dy
                                + ic[start:end, None] * dy * dy)
                alpha = (opac.detach()[start:end, None]
                         * torch.exp(power)).clamp(max=_ALPHA_CEILING)
                log_keep = torch.cumsum(torch.log1p(-alpha), dim=0)
                t_before = carry.detach() * torch.exp(torch.cat(
                    [torch.zeros(1, P, dtype=dtype, device=dev),
                     log_keep[:-1]], dim=0))
                w = alpha * t_before
                depth_acc = depth_acc + (w * zc[start:end, None].detach()).sum(dim=0)
        carry = new_carry

    rgb = rgb_acc + carry.unsqueeze(1) * bg
    depth = None
    if want_depth:
        with torch.no_grad():
            covered = alpha_acc.detach() > _ALPHA_EPS
            depth = torch.where(covered, depth_acc / alpha_acc.detach().clamp_min(_ALPHA_EPS),
                                torch.zeros_like(depth_acc))
            depth = depth.reshape(H, W)
    return rgb.reshape(H, W, C), alpha_acc.reshape(H, W), depth


def scene_tensors(scene: GaussianScene, dtype=torch.float32):
    def t(arr):
        # mirrored scenes expose read-only arrays; torch needs writable memory
        return torch.from_numpy(arr if arr.flags.writeable else arr.copy()).to(dtype)

    return (t(scene.positions), t(scene.rotations), t(scene.log_scales),
            t(scene.opacity_logits), t(scene.colors))


def render(scene: GaussianScene, shifts, camera: Camera,
           background: float = 0.0, want_depth: bool = False,
           dtype=torch.float32) -> RenderOutput:
    """Forward render of scene with per-primitive position shifts applied."""
    pos, rot, ls, op, col = scene_tensors(scene, dtype)
    if shifts is not None:
        sh = torch.as_tensor(np.asarray(shifts), dtype=dtype)
        if sh.shape != pos.shape:
            raise StateError(f"shifts shape {tuple(sh.shape)} != {tuple(pos.shape)}")
        pos = pos + sh
    with torch.no_grad():
        rgb, alpha, depth = splat_render(pos, rot, ls, op, col, camera,
                                         background, want_depth)
    return RenderOutput(
        rgb=rgb.numpy(),
        alpha=alpha.numpy(),
        depth=None if depth is None else depth.numpy(),
    )


def render_backward(scene: GaussianScene, shifts, camera: Camera,
                    grad_rgb: np.ndarray, background: float = 0.0,
                    dtype=torch.float64) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of the compositing chain.

    grad_rgb is dL/d(rgb image), shape (H, W, 3). Returns gradients for the
    position shift, opacity logit, color, log-scale, and raw quaternion of
    every primitive (zeros where a primitive contributes nothing).
    """
    if grad_rgb.shape != (camera.height, camera.width, 3):
        raise StateError(
            f"grad image shape {grad_rgb.shape} does not match camera "
            f"{(camera.height, camera.width, 3)}")
    pos, rot, ls, op, col = scene_tensors(scene, dtype)
    base = pos
    shift = torch.zeros_like(pos) if shifts is None else torch.as_tensor(
        np.asarray(shifts), dtype=dtype)
    leaves = [shift, op, col, ls, rot]
    for leaf in leaves:
        leaf.requires_grad_(True)
    rgb, _, _ = splat_render(base + shift, rot, ls, op, col, camera, background)
    grads = torch.autograd.grad(
        outputs=rgb, inputs=leaves,
        grad_outputs=torch.as_tensor(grad_rgb, dtype=dtype),
        allow_unused=True)
    names = ("shift", "opacity", "color", "scale", "rotation")
    return {name: (torch.zeros_like(leaf) if g is None else g).numpy()
            for name, leaf, g in zip(names, leaves, grads)}


def render_mask(mirrored: MirroredScene, camera: Camera,
                threshold: float = 0.5) -> np.ndarray:
    """Composite the mirror's mask flags as a scalar color, then threshold."""
    scene = mirrored.scene
    pos, rot, ls, op, _ = scene_tensors(scene, torch.float32)
    flags = torch.from_numpy(scene.mask.astype(np.float32)).unsqueeze(1)
    with torch.no_grad():
        value, _, _ = splat_render(pos, rot, ls, op, flags, camera, 0.0)
    return (value[:, :, 0].numpy() > threshold).astype(np.uint8)


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Morphological dilation with a square element of side 2*radius + 1."""
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return mask.copy()
    out = ndimage.maximum_filter(mask.astype(np.uint8), size=2 * radius + 1,
                                 mode="constant", cval=0)
    return (out > 0).astype(np.uint8)


def dilation_radius_for(width: int, base_radius: int = 10,
                        base_width: int = 512) -> int:
    """Default dilation radius, proportional to render width."""
    return max(0, int(round(base_radius * width / base_width)))


def rgb_to_png_bytes(rgb: np.ndarray) -> bytes:
    from io import BytesIO

    from PIL import Image

    img = Image.fromarray((np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8))
    buf = BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
