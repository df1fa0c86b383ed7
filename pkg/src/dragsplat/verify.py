"""Self-contained verification suites for the CLI.

Each suite re-derives expected values with small brute-force reference
implementations kept local to this module, so a binary install can check
itself without the test tree.
"""

from __future__ import annotations

import numpy as np
import torch

from .cameras import Camera
from .engine import build_soft_group, select_mask_frustum
from .guidance import (DiffusionSchedule, SourceEstimator, add_noise, cfg_scale,
                       denoised_estimate, source_estimator_loss,
                       timestep_schedule)
from .render import dilate_mask, render_backward, splat_render
from .scene import make_scene
from .triplane import TriplaneDeformation, model_backward, sample_plane

Check = tuple[str, bool, str]


def _scene(rng, n):
    return make_scene(rng.uniform(-0.5, 0.5, (n, 3)),
                      rng.normal(size=(n, 4)),
                      rng.uniform(np.log(0.02), np.log(0.1), (n, 3)),
                      rng.uniform(-1, 2, n),
                      rng.uniform(0.2, 0.8, (n, 3)),
                      (rng.random(n) < 0.5).astype(np.uint8))


def _camera(width=16, height=16, focal=18.0):
    return Camera(fx=focal, fy=focal, cx=width / 2, cy=height / 2,
                  width=width, height=height, rotation=np.eye(3),
                  translation=np.array([0.0, 0.0, 2.5]))


def verify_schedules() -> list[Check]:
    checks = []
    checks.append(("timestep(0) == 0.98", timestep_schedule(0.0) == 0.98, ""))
    checks.append(("timestep(1) == 0.02", timestep_schedule(1.0) == 0.02, ""))
    v = timestep_schedule(0.36)
    checks.append(("timestep(0.36) ~ 0.704", 0.70 <= v <= 0.71, f"got {v:.4f}"))
    checks.append(("cfg(0) == 4", cfg_scale(0.0) == 4.0, ""))
    checks.append(("cfg(1) == 1", cfg_scale(1.0) == 1.0, ""))
    grid = np.linspace(0, 1, 101)
    ts = [timestep_schedule(s) for s in grid]
    checks.append(("timestep strictly decreasing",
                   all(a > b for a, b in zip(ts, ts[1:])), ""))
    sched = DiffusionSchedule()
    checks.append(("alpha_bar strictly decreasing",
                   bool((np.diff(sched.alpha_bars) < 0).all()), ""))
    rng = np.random.default_rng(0)
    z = torch.tensor(rng.standard_normal((2, 2, 3)))
    eps = torch.tensor(rng.standard_normal((2, 2, 3)))
    worst = max(float((denoised_estimate(add_noise(z, sched.alpha_bar(t), eps),
                                         eps, sched.alpha_bar(t)) - z).abs().max())
                for t in range(1, 1001, 7))
    checks.append(("inversion identity <= 1e-6", worst < 1e-6, f"worst {worst:.2e}"))
    return checks


def verify_gradients() -> list[Check]:
    checks = []
    rng = np.random.default_rng(11)
    worst = 0.0
    for trial in range(3):
        scene = _scene(rng, 6)
        cam = _camera()
        upstream = rng.standard_normal((16, 16, 3))
        grads = render_backward(scene, None, cam, upstream)
        arrs = {
            "shift": np.zeros((6, 3)),
            "opacity": scene.opacity_logits.astype(np.float64),
            "color": scene.colors.astype(np.float64),
            "scale": scene.log_scales.astype(np.float64),
            "rotation": scene.rotations.astype(np.float64),
        }
        pos = scene.positions.astype(np.float64)

        def forward():
            rgb, _, _ = splat_render(
                torch.as_tensor(pos) + torch.as_tensor(arrs["shift"]),
                torch.as_tensor(arrs["rotation"]), torch.as_tensor(arrs["scale"]),
                torch.as_tensor(arrs["opacity"]), torch.as_tensor(arrs["color"]),
                cam)
            return float((rgb * torch.as_tensor(upstream)).sum())

        h = 1e-4
        sample = np.random.default_rng(trial)
        for name, arr in arrs.items():
            flat = arr.reshape(-1)
            gan = grads[name].reshape(-1)
            for k in sample.choice(flat.size, size=min(6, flat.size), replace=False):
                orig = flat[k]
                flat[k] = orig + h
                fp = forward()
                flat[k] = orig - h
                fm = forward()
                flat[k] = orig
                fd = (fp - fm) / (2 * h)
                if max(abs(fd), abs(gan[k])) > 1e-8:
                    worst = max(worst, abs(fd - gan[k]) / max(abs(fd), abs(gan[k])))
    checks.append(("renderer FD agreement <= 1e-3", worst <= 1e-3,
                   f"worst {worst:.2e}"))

    gen = torch.Generator().manual_seed(0)
    model = TriplaneDeformation(np.array([[-1.0, -1, -1], [1, 1, 1.0]]),
                                resolutions=(4, 8), feature_dim=3,
                                hidden_dim=16, dtype=torch.float64, generator=gen)
    with torch.no_grad():
        last = [m for m in model.head_masked if isinstance(m, torch.nn.Linear)][-1]
        last.weight.normal_(0, 0.3, generator=gen)
    pts = torch.tensor(rng.uniform(-1, 1, (10, 3)))
    flags = torch.tensor([True] * 5 + [False] * 5)
    up = torch.zeros(10, 3, dtype=torch.float64)
    up[:5] = torch.tensor(rng.standard_normal((5, 3)))
    grads = model_backward(model, pts, flags, up)
    worst_m = 0.0
    h = 1e-5
    for p, g in zip(model.encoder_parameters(), grads["planes"] + grads["fusion"]):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        nz = torch.nonzero(gflat).squeeze(1)
        for k in nz[:4]:
            orig = float(flat[k])
            with torch.no_grad():
                flat[k] = orig + h
                fp = float((model(pts, flags) * up).sum())
                flat[k] = orig - h
                fm = float((model(pts, flags) * up).sum())
                flat[k] = orig
            fd = (fp - fm) / (2 * h)
            an = float(gflat[k])
            if max(abs(fd), abs(an)) > 1e-8:
                worst_m = max(worst_m, abs(fd - an) / max(abs(fd), abs(an)))
    checks.append(("deformation FD agreement <= 1e-3", worst_m <= 1e-3,
                   f"worst {worst_m:.2e}"))

    est = SourceEstimator(1, (2, 2, 3), dtype=torch.float64)
    with torch.no_grad():
        est.offsets[0] = torch.tensor(rng.standard_normal((2, 2, 3)))
    z_t = torch.tensor(rng.standard_normal((2, 2, 3)))
    eps = torch.tensor(rng.standard_normal((2, 2, 3)))
    loss = source_estimator_loss(est, z_t, 0.4, eps, 0)
    loss.backward()
    flat = est.offsets.data.reshape(-1)
    g = est.offsets.grad.reshape(-1)
    worst_e = 0.0
    for k in range(4):
        orig = float(flat[k])
        flat[k] = orig + 1e-6
        fp = float(source_estimator_loss(est, z_t, 0.4, eps, 0))
        flat[k] = orig - 1e-6
        fm = float(source_estimator_loss(est, z_t, 0.4, eps, 0))
        flat[k] = orig
        fd = (fp - fm) / 2e-6
        worst_e = max(worst_e, abs(fd - float(g[k])) / max(abs(fd), 1e-12))
    checks.append(("estimator FD agreement <= 1e-5", worst_e <= 1e-5,
                   f"worst {worst_e:.2e}"))
    return checks


def verify_routing() -> list[Check]:
    gen = torch.Generator().manual_seed(3)
    model = TriplaneDeformation(np.array([[-1.0, -1, -1], [1, 1, 1.0]]),
                                resolutions=(4,), feature_dim=2, hidden_dim=8,
                                dtype=torch.float64, generator=gen)
    with torch.no_grad():
        for head in (model.head_masked, model.head_unmasked):
            last = [m for m in head if isinstance(m, torch.nn.Linear)][-1]
            last.weight.normal_(0, 0.3, generator=gen)
        for pl in model.planes:
            pl.normal_(0, 0.5, generator=gen)
    rng = np.random.default_rng(5)
    pts = torch.tensor(rng.uniform(-1, 1, (8, 3)))
    flags = torch.tensor([True] * 4 + [False] * 4)
    checks = []

    shifts = model(pts, flags)
    shifts[~flags].sum().backward()
    ok = all(p.grad is None or bool((p.grad == 0).all())
             for p in model.encoder_parameters() + list(model.head_masked.parameters()))
    got = any(p.grad is not None and float(p.grad.abs().sum()) > 0
              for p in model.head_unmasked.parameters())
    checks.append(("unmasked loss: encoder/head1 grads exactly zero", ok, ""))
    checks.append(("unmasked loss: head2 receives gradient", got, ""))

    model.zero_grad()
    shifts = model(pts, flags)
    shifts[flags].sum().backward()
    ok2 = all(p.grad is None or bool((p.grad == 0).all())
              for p in model.head_unmasked.parameters())
    checks.append(("masked loss: head2 grads exactly zero", ok2, ""))

    fresh = TriplaneDeformation(np.array([[-1.0, -1, -1], [1, 1, 1.0]]),
                                resolutions=(4,), feature_dim=2, hidden_dim=8)
    out = fresh(torch.tensor(rng.uniform(-1, 1, (5, 3)), dtype=torch.float32),
                torch.tensor([True, False, True, False, True]))
    checks.append(("zero shifts at initialization", bool((out == 0).all()), ""))
    return checks


def verify_oracles() -> list[Check]:
    rng = np.random.default_rng(7)
    checks = []

    # bilinear sampling vs direct interpolation
    grid = torch.tensor(rng.standard_normal((3, 8, 8)))
    worst = 0.0
    for _ in range(50):
        uv = rng.uniform(-1, 1, 2)
        got = sample_plane(grid, torch.tensor(uv).reshape(1, 2))[0].numpy()
        gnp = grid.numpy()
        x = (uv[0] + 1) / 2 * 7
        y = (uv[1] + 1) / 2 * 7
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        x1, y1 = min(x0 + 1, 7), min(y0 + 1, 7)
        fx, fy = x - x0, y - y0
        ref = (gnp[:, y0, x0] * (1 - fx) * (1 - fy) + gnp[:, y0, x1] * fx * (1 - fy)
               + gnp[:, y1, x0] * (1 - fx) * fy + gnp[:, y1, x1] * fx * fy)
        worst = max(worst, float(np.abs(got - ref).max()))
    checks.append(("bilinear sampling matches direct form", worst < 1e-7,
                   f"worst {worst:.2e}"))

    # soft-group KNN vs all-pairs
    ok = True
    for trial in range(5):
        scene = _scene(np.random.default_rng(trial), 60)
        if not scene.mask.any() or scene.mask.all():
            continue
        got = set(build_soft_group(scene, 8).tolist())
        ref = set()
        pos = scene.positions.astype(np.float64)
        for i in np.flatnonzero(scene.mask):
            d = np.linalg.norm(pos - pos[i], axis=1)
            order = sorted((float(d[j]), j) for j in range(60) if j != i)
            for _, j in order[:8]:
                if scene.mask[j] == 0:
                    ref.add(j)
        ok &= got == ref
    checks.append(("soft-group KNN matches all-pairs", ok, ""))

    # frustum intersection vs per-point double projection
    ok = True
    for trial in range(5):
        scene = _scene(np.random.default_rng(trial + 50), 40)
        cam = _camera(32, 32, 24.0)
        rect = (4.0, 6.0, 28.0, 30.0)
        try:
            got = select_mask_frustum(scene, [(cam, rect)])
        except Exception:
            got = np.zeros(40, dtype=bool)
        ref = np.zeros(40, dtype=bool)
        for i, p in enumerate(scene.positions.astype(np.float64)):
            pc = cam.rotation @ p + cam.translation
            if pc[2] <= 0:
                continue
            u = cam.cx + cam.fx * pc[0] / pc[2]
            v = cam.cy + cam.fy * pc[1] / pc[2]
            ref[i] = rect[0] <= u < rect[2] and rect[1] <= v < rect[3]
        ok &= bool((got == ref).all())
    checks.append(("frustum selection matches double projection", ok, ""))

    # dilation vs max filter
    ok = True
    for trial in range(5):
        m = (np.random.default_rng(trial).random((14, 17)) < 0.2).astype(np.uint8)
        got = dilate_mask(m, 2)
        ref = np.zeros_like(m)
        for i in range(14):
            for j in range(17):
                ref[i, j] = m[max(0, i - 2):i + 3, max(0, j - 2):j + 3].max()
        ok &= bool((got == ref).all())
    checks.append(("mask dilation matches max filter", ok, ""))
    return checks


SUITES = {
    "schedules": verify_schedules,
    "gradients": verify_gradients,
    "routing": verify_routing,
    "oracles": verify_oracles,
}


def run_suites(names) -> tuple[list[Check], bool]:
    checks: list[Check] = []
    for name in names:
        checks.extend(SUITES[name]())
    return checks, all(ok for _, ok, _ in checks)
