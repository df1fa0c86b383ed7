import math

import numpy as np
import pytest
import torch

from dragsplat.errors import ConfigurationError
from dragsplat.guidance import (DiffusionSchedule, GuidanceRequest,
                                GuidanceResponse, LatentCodec, SourceEstimator,
                                SyntheticOracle, add_noise, cfg_scale,
                                composite_noise, denoised_estimate,
                                drag_sds_losses, source_estimator_loss,
                                timestep_schedule)


# ---------------------------------------------------------------- schedules

def test_timestep_endpoints_exact():
    assert timestep_schedule(0.0) == 0.98
    assert timestep_schedule(1.0) == 0.02


def test_timestep_at_stage_transition():
    v = timestep_schedule(0.36)
    assert 0.70 <= v <= 0.71
    assert abs(v - 0.704) < 5e-4


def test_timestep_strictly_decreasing():
    grid = np.linspace(0, 1, 201)
    vals = [timestep_schedule(s) for s in grid]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_timestep_clamps_with_warning():
    with pytest.warns(UserWarning):
        assert timestep_schedule(-0.5) == 0.98
    with pytest.warns(UserWarning):
        assert timestep_schedule(1.5) == 0.02


def test_cfg_values():
    assert cfg_scale(0.0) == 4.0
    assert cfg_scale(1.0) == 1.0
    assert cfg_scale(0.5) == 1.75
    grid = np.linspace(0, 1, 101)
    vals = [cfg_scale(s) for s in grid]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert all(1.0 <= v <= 4.0 for v in vals)


def test_schedule_invariants():
    sched = DiffusionSchedule()
    assert sched.alpha_bars.shape == (1000,)
    assert (np.diff(sched.alpha_bars) < 0).all()
    assert abs(sched.alpha_bars[0] - 1.0) < 1e-3
    assert (sched.alpha_bars > 0).all() and (sched.alpha_bars <= 1).all()
    assert sched.step_for_ratio(0.0) == 980
    assert sched.step_for_ratio(1.0) == 20


# ------------------------------------------------------------ noising maps

def test_add_noise_limits(rng):
    sched = DiffusionSchedule()
    z = torch.tensor(rng.standard_normal((4, 4, 3)))
    eps = torch.tensor(rng.standard_normal((4, 4, 3)))
    near_one = sched.alpha_bar(1)  # sqrt(1 - abar) = 0.01
    zt = add_noise(z, near_one, eps)
    assert float((zt - z).abs().max()) < 0.01 * float(eps.abs().max()) + 1e-4
    zt0 = add_noise(z, sched.alpha_bar(500), torch.zeros_like(eps))
    assert torch.allclose(zt0, math.sqrt(sched.alpha_bar(500)) * z)


def test_inversion_identity_every_step(rng):
    sched = DiffusionSchedule()
    z = torch.tensor(rng.standard_normal((2, 2, 3)))
    eps = torch.tensor(rng.standard_normal((2, 2, 3)))
    worst = 0.0
    for t in range(1, 1001):
        ab = sched.alpha_bar(t)
        back = denoised_estimate(add_noise(z, ab, eps), eps, ab)
        worst = max(worst, float((back - z).abs().max()))
    assert worst < 1e-6


def test_denoised_estimate_formula(rng):
    sched = DiffusionSchedule()
    for _ in range(20):
        t = int(rng.integers(1, 1001))
        ab = sched.alpha_bar(t)
        zt = torch.tensor(rng.standard_normal((3, 3, 3)))
        eh = torch.tensor(rng.standard_normal((3, 3, 3)))
        got = denoised_estimate(zt, eh, ab)
        oracle = (zt.numpy() - np.sqrt(1 - ab) * eh.numpy()) / np.sqrt(ab)
        assert np.abs(got.numpy() - oracle).max() < 1e-9
    zt = torch.tensor(rng.standard_normal((2, 2, 3)))
    assert torch.allclose(denoised_estimate(zt, torch.zeros_like(zt), 0.25),
                          zt / 0.5)


def test_composite_noise(rng):
    a = torch.tensor(rng.standard_normal((4, 4, 3)))
    b = torch.tensor(rng.standard_normal((4, 4, 3)))
    e = torch.tensor(rng.standard_normal((4, 4, 3)))
    assert torch.equal(composite_noise(a, a, e), e)
    assert torch.equal(composite_noise(a, torch.zeros_like(a), torch.zeros_like(a)), a)
    got = composite_noise(a, b, e)
    assert np.array_equal(got.numpy(), a.numpy() - b.numpy() + e.numpy())


# -------------------------------------------------------------------- codec

def test_codec_roundtrip_constant():
    codec = LatentCodec()
    z = torch.full((4, 6, 3), 0.375, dtype=torch.float64)
    back = codec.encode(codec.decode(z))
    assert torch.equal(back, z)


def test_codec_linearity(rng):
    codec = LatentCodec()
    x = torch.tensor(rng.standard_normal((16, 24, 3)))
    y = torch.tensor(rng.standard_normal((16, 24, 3)))
    a, b = 1.75, -0.3125  # exactly representable
    lhs = codec.encode(a * x + b * y)
    rhs = a * codec.encode(x) + b * codec.encode(y)
    assert float((lhs - rhs).abs().max()) < 1e-12
    lhs_d = codec.decode(a * codec.encode(x) + b * codec.encode(y))
    rhs_d = a * codec.decode(codec.encode(x)) + b * codec.decode(codec.encode(y))
    assert float((lhs_d - rhs_d).abs().max()) < 1e-12


def test_codec_shapes(rng):
    codec = LatentCodec()
    img = torch.tensor(rng.standard_normal((32, 64, 3)))
    z = codec.encode(img)
    assert z.shape == (4, 8, 3)
    assert codec.decode(z).shape == (32, 64, 3)
    with pytest.raises(ConfigurationError):
        codec.encode(torch.zeros(30, 64, 3))


# -------------------------------------------------------- source estimator

def test_estimator_loss_values(rng):
    est = SourceEstimator(2, (2, 2, 3), dtype=torch.float64)
    ab = 0.5
    eps = torch.tensor(rng.standard_normal((2, 2, 3)))
    z_t = math.sqrt(1 - ab) * eps  # prediction == eps when belief is zero
    assert float(source_estimator_loss(est, z_t, ab, eps, 0)) < 1e-18

    ones = torch.ones(2, 2, 3, dtype=torch.float64)
    loss = source_estimator_loss(est, torch.zeros(2, 2, 3, dtype=torch.float64),
                                 ab, ones, 1)
    assert abs(float(loss) - 1.0) < 1e-12


def test_estimator_gradients_fd(rng):
    est = SourceEstimator(1, (2, 2, 1), dtype=torch.float64)
    with torch.no_grad():
        est.base[0] = torch.tensor(rng.standard_normal((2, 2, 1)))
        est.offsets[0] = torch.tensor(rng.standard_normal((2, 2, 1)))
        est.y_null.copy_(torch.tensor(rng.standard_normal((2, 2, 1))))
    ab = 0.37
    z_t = torch.tensor(rng.standard_normal((2, 2, 1)))
    eps = torch.tensor(rng.standard_normal((2, 2, 1)))
    loss = source_estimator_loss(est, z_t, ab, eps, 0)
    loss.backward()
    h = 1e-6
    for param in (est.offsets, est.y_null):
        flat = param.data.reshape(-1)
        gflat = param.grad.reshape(-1)
        for k in range(flat.numel()):
            orig = float(flat[k])
            flat[k] = orig + h
            fp = float(source_estimator_loss(est, z_t, ab, eps, 0))
            flat[k] = orig - h
            fm = float(source_estimator_loss(est, z_t, ab, eps, 0))
            flat[k] = orig
            fd = (fp - fm) / (2 * h)
            assert abs(fd - float(gflat[k])) / max(abs(fd), 1e-12) < 1e-5


def test_estimator_no_leak_into_input():
    est = SourceEstimator(1, (2, 2, 3), dtype=torch.float64)
    z_t = torch.zeros(2, 2, 3, dtype=torch.float64, requires_grad=True)
    eps = torch.ones(2, 2, 3, dtype=torch.float64, requires_grad=True)
    loss = source_estimator_loss(est, z_t, 0.5, eps, 0)
    loss.backward()
    assert z_t.grad is None and eps.grad is None
    assert est.offsets.grad is not None


# ------------------------------------------------------------ Drag-SDS loss

def test_drag_sds_zero_at_fixed_point(rng):
    z = torch.tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
    x = torch.tensor(rng.standard_normal((16, 16, 3)), requires_grad=True)
    lat, img = drag_sds_losses(z, x, z.detach().clone(), x.detach().clone(), 0.5)
    assert float(lat) == 0.0 and float(img) == 0.0
    (lat + img).backward()
    assert (z.grad == 0).all() and (x.grad == 0).all()


def test_drag_sds_gradient_formula(rng):
    ab = 0.41
    w = 1.0
    z = torch.tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
    x = torch.tensor(rng.standard_normal((16, 16, 3)), requires_grad=True)
    z_hat = torch.tensor(rng.standard_normal((2, 2, 3)))
    x_hat = torch.tensor(rng.standard_normal((16, 16, 3)))
    lat, img = drag_sds_losses(z, x, z_hat, x_hat, ab, w)
    lat.backward()
    k = w * math.sqrt(ab) / math.sqrt(1 - ab)
    expected = 2 * k * (z.detach() - z_hat)
    assert float((z.grad - expected).abs().max()) < 1e-12

    h = 1e-6
    flat = z.data.reshape(-1)
    for k_i in range(3):
        orig = float(flat[k_i])
        flat[k_i] = orig + h
        fp = float(drag_sds_losses(z, x, z_hat, x_hat, ab, w)[0])
        flat[k_i] = orig - h
        fm = float(drag_sds_losses(z, x, z_hat, x_hat, ab, w)[0])
        flat[k_i] = orig
        fd = (fp - fm) / (2 * h)
        rel = abs(fd - float(z.grad.reshape(-1)[k_i])) / max(abs(fd), 1e-12)
        assert rel < 1e-5


def test_drag_sds_no_leak_into_targets(rng):
    z = torch.tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
    x = torch.tensor(rng.standard_normal((16, 16, 3)), requires_grad=True)
    z_hat = torch.tensor(rng.standard_normal((2, 2, 3)), requires_grad=True)
    x_hat = torch.tensor(rng.standard_normal((16, 16, 3)), requires_grad=True)
    lat, img = drag_sds_losses(z, x, z_hat, x_hat, 0.3)
    (lat + 0.1 * img).backward()
    assert z_hat.grad is None and x_hat.grad is None


# --------------------------------------------------------- synthetic oracle

def _request_for(image, noise, ab, cfg, t=500):
    return GuidanceRequest(
        image=image, init_image=image.copy(),
        mask=np.zeros(image.shape[:2], dtype=np.float32),
        points=[{"handle": [1.0, 2.0], "target": [3.0, 4.0]}],
        t=t, alpha_bar=ab, noise=noise, cfg=cfg, seed=7)


def test_oracle_fixed_point(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    codec = LatentCodec()
    est = SourceEstimator(1, (2, 2, 3))
    est.set_base(0, codec.encode(torch.tensor(img)))
    oracle = SyntheticOracle({0: img}, codec, est)
    ab = 0.6
    noise = rng.standard_normal((2, 2, 3)).astype(np.float32)
    resp = oracle.respond(_request_for(img, noise, ab, cfg=3.0), 0)
    eps_hat = composite_noise(torch.tensor(resp.eps_tgt),
                              torch.tensor(resp.eps_src),
                              torch.tensor(noise).to(torch.float64))
    assert float((eps_hat - torch.tensor(noise)).abs().max()) < 1e-5
    z = codec.encode(torch.tensor(img, dtype=torch.float64))
    z_t = add_noise(z, ab, torch.tensor(noise, dtype=torch.float64))
    z_hat = denoised_estimate(z_t, eps_hat, ab)
    assert float((z_hat - z).abs().max()) < 1e-5


def test_oracle_cfg_one_recovers_target(rng):
    cur = rng.random((16, 16, 3)).astype(np.float32)
    tgt = rng.random((16, 16, 3)).astype(np.float32)
    codec = LatentCodec()
    oracle = SyntheticOracle({0: tgt}, codec)  # exact-source mode
    ab = 0.35
    noise = rng.standard_normal((2, 2, 3)).astype(np.float32)
    resp = oracle.respond(_request_for(cur, noise, ab, cfg=1.0), 0)
    z = codec.encode(torch.tensor(cur, dtype=torch.float64))
    z_t = add_noise(z, ab, torch.tensor(noise, dtype=torch.float64))
    eps_hat = composite_noise(torch.tensor(resp.eps_tgt),
                              torch.tensor(resp.eps_src),
                              torch.tensor(noise, dtype=torch.float64))
    z_hat = denoised_estimate(z_t, eps_hat, ab)
    z_tgt = codec.encode(torch.tensor(tgt, dtype=torch.float64))
    assert float((z_hat - z_tgt).abs().max()) < 1e-6


def test_oracle_timestep_invariant_target(rng):
    cur = rng.random((16, 16, 3)).astype(np.float32)
    tgt = rng.random((16, 16, 3)).astype(np.float32)
    codec = LatentCodec()
    oracle = SyntheticOracle({0: tgt}, codec, dtype=torch.float64)
    noise = rng.standard_normal((2, 2, 3)).astype(np.float32)
    sched = DiffusionSchedule()
    z = codec.encode(torch.tensor(cur, dtype=torch.float64))
    z_hats = []
    for t in (200, 800):
        ab = sched.alpha_bar(t)
        resp = oracle.respond(_request_for(cur, noise, ab, cfg=2.5, t=t), 0)
        z_t = add_noise(z, ab, torch.tensor(noise, dtype=torch.float64))
        eps_hat = composite_noise(torch.tensor(resp.eps_tgt),
                                  torch.tensor(resp.eps_src),
                                  torch.tensor(noise, dtype=torch.float64))
        z_hats.append(denoised_estimate(z_t, eps_hat, ab))
    assert float((z_hats[0] - z_hats[1]).abs().max()) < 1e-9


def test_oracle_cfg_only_on_target_branch(rng):
    cur = rng.random((16, 16, 3)).astype(np.float32)
    tgt = rng.random((16, 16, 3)).astype(np.float32)
    est = SourceEstimator(1, (2, 2, 3))
    with torch.no_grad():
        est.offsets[0] = torch.tensor(rng.standard_normal((2, 2, 3)),
                                      dtype=torch.float32)
    oracle = SyntheticOracle({0: tgt}, estimator=est)
    noise = rng.standard_normal((2, 2, 3)).astype(np.float32)
    r1 = oracle.respond(_request_for(cur, noise, 0.5, cfg=1.0), 0)
    r4 = oracle.respond(_request_for(cur, noise, 0.5, cfg=4.0), 0)
    assert np.array_equal(r1.eps_src, r4.eps_src)
    assert not np.array_equal(r1.eps_tgt, r4.eps_tgt)


def test_oracle_missing_camera(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    oracle = SyntheticOracle({0: img})
    noise = rng.standard_normal((2, 2, 3)).astype(np.float32)
    with pytest.raises(ConfigurationError):
        oracle.respond(_request_for(img, noise, 0.5, cfg=1.0), 3)


def test_response_shape_validation():
    resp = GuidanceResponse(np.zeros((2, 2, 3), dtype=np.float32),
                            np.zeros((2, 2, 3), dtype=np.float32))
    resp.validate_shape((2, 2, 3))
    from dragsplat.errors import GuidanceUnavailableError
    with pytest.raises(GuidanceUnavailableError):
        resp.validate_shape((4, 4, 3))


# ------------------------------------------- clean-latent equivalent forms

def test_guidance_correction_matches_two_step_path(rng):
    from dragsplat.guidance import guidance_correction
    z = torch.tensor(rng.standard_normal((2, 2, 3)))
    eps = torch.tensor(rng.standard_normal((2, 2, 3)))
    e_t = torch.tensor(rng.standard_normal((2, 2, 3)))
    e_s = torch.tensor(rng.standard_normal((2, 2, 3)))
    ab = 0.43
    direct = guidance_correction(z, e_t, e_s, ab)
    two_step = denoised_estimate(add_noise(z, ab, eps),
                                 composite_noise(e_t, e_s, eps), ab)
    assert float((direct - two_step).abs().max()) < 1e-12
    # exact cancellation when target and source branches agree
    exact = guidance_correction(z, e_t, e_t.clone(), ab)
    assert torch.equal(exact, z)


def test_residual_loss_matches_noise_form(rng):
    from dragsplat.guidance import source_estimator_residual_loss
    est = SourceEstimator(1, (2, 2, 3), dtype=torch.float64)
    with torch.no_grad():
        est.base[0] = torch.tensor(rng.standard_normal((2, 2, 3)))
        est.offsets[0] = torch.tensor(rng.standard_normal((2, 2, 3)) * 0.1)
    ab = 0.61
    z = torch.tensor(rng.standard_normal((2, 2, 3)))
    eps = torch.tensor(rng.standard_normal((2, 2, 3)))
    z_t = add_noise(z, ab, eps)
    noise_form = source_estimator_loss(est, z_t, ab, eps, 0)
    residual_form = source_estimator_residual_loss(est, z, ab, 0)
    assert abs(float(noise_form) - float(residual_form)) < 1e-12
    # exactly zero when the belief equals the current latent
    with torch.no_grad():
        est.offsets[0].zero_()
        est.base[0] = z
    assert float(source_estimator_residual_loss(est, z, ab, 0)) == 0.0
