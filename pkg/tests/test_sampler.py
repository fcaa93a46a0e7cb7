import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sadm.diffusion import NoiseDraw, forward_marginal
from sadm.image import ImageTensor, resize
from sadm.prior import assemble_condition
from sadm.quality import psnr
from sadm.sampler import (
    DEFAULT_FACTORS,
    FunctionDenoiser,
    OracleDenoiser,
    PyramidPlan,
    cross_scale_lift,
    ddim_coefficients,
    ddim_step,
    flat_sample,
    make_pyramid_plan,
    pyramid_sample,
    scale_for_timestep,
)
from sadm.schedule import build_schedule


def smooth_image(seed, size=64):
    # a few low-frequency cosines, comfortably inside [0, 1]
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.full((size, size, 3), 0.5)
    for c in range(3):
        for _ in range(3):
            fy, fx = rng.integers(0, 3, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            out[:, :, c] += 0.12 * np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
    return out


def on_manifold(x0, t, s, eps):
    return s.signal_coef[t] * x0 + math.sqrt(s.noise_var[t]) * eps


# ---------------------------------------------------------------- DDIM


@pytest.mark.parametrize("t,p", [(1000, 700), (700, 300), (300, 0), (1000, 0), (2, 1)])
def test_ddim_stays_on_manifold(default_schedule, rng, t, p):
    s = default_schedule
    x0 = rng.random((5, 5, 3))
    eps = rng.standard_normal(x0.shape)
    out = ddim_step(on_manifold(x0, t, s, eps), t, p, s, eps)
    expect = x0 if p == 0 else on_manifold(x0, p, s, eps)
    assert np.max(np.abs(out - expect)) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(3, 1000), st.data())
def test_ddim_composition_invariance(t, data):
    s = _DEFAULT
    q = data.draw(st.integers(2, t - 1))
    p = data.draw(st.integers(0, q - 1))
    x0 = np.linspace(0, 1, 12).reshape(2, 2, 3)
    eps = np.cos(np.arange(12.0)).reshape(2, 2, 3)
    xt = on_manifold(x0, t, s, eps)
    oracle = OracleDenoiser(x0, s)
    direct = ddim_step(xt, t, p, s, oracle.predict(xt, t))
    mid = ddim_step(xt, t, q, s, oracle.predict(xt, t))
    two = ddim_step(mid, q, p, s, oracle.predict(mid, q))
    assert np.max(np.abs(direct - two)) <= 1e-9


def test_ddim_coefficients_constraints(default_schedule):
    s = default_schedule
    for t, p, sigma in [(1000, 900, 0.0), (500, 100, 0.1), (300, 1, 0.0), (50, 10, 0.01)]:
        m, n = ddim_coefficients(t, p, s, sigma)
        assert m + n * s.signal_coef[t] == pytest.approx(s.signal_coef[p], rel=1e-12)
        assert n * n * s.noise_var[t] + sigma**2 == pytest.approx(s.noise_var[p], rel=1e-12)


def test_ddim_coefficient_form_matches_step(default_schedule, rng):
    s = default_schedule
    x0 = rng.random((3, 3, 3))
    xt = rng.standard_normal(x0.shape)
    eps = (xt - s.signal_coef[600] * x0) / math.sqrt(s.noise_var[600])
    m, n = ddim_coefficients(600, 250, s)
    assert np.allclose(ddim_step(xt, 600, 250, s, eps), m * x0 + n * xt, rtol=0, atol=1e-10)


def test_ddim_rejects_bad_pairs(default_schedule):
    x = np.zeros((2, 2, 3))
    with pytest.raises(ValueError):
        ddim_step(x, 300, 300, default_schedule, x)
    with pytest.raises(ValueError):
        ddim_step(x, 300, 500, default_schedule, x)
    with pytest.raises(ValueError, match="sigma"):
        ddim_coefficients(300, 200, default_schedule, sigma=10.0)
    with pytest.raises(ValueError, match="noise draw"):
        ddim_step(x, 300, 200, default_schedule, x, sigma=0.01)


def test_ddim_degenerates_to_ddpm(ddpm_schedule, rng):
    s = ddpm_schedule
    alpha_bar = np.cumprod(np.concatenate([[1.0], 1.0 - s.b_sq[1:]]))
    x = rng.standard_normal((4, 4, 3))
    eps = rng.standard_normal(x.shape)
    for t, p in [(1000, 900), (500, 20), (10, 0)]:
        x0_pred = (x - math.sqrt(1 - alpha_bar[t]) * eps) / math.sqrt(alpha_bar[t])
        ref = math.sqrt(alpha_bar[p]) * x0_pred + math.sqrt(1 - alpha_bar[p]) * eps
        assert np.max(np.abs(ddim_step(x, t, p, s, eps) - ref)) <= 1e-10 * max(1.0, np.abs(ref).max())


def test_stochastic_ddim_formula(default_schedule, rng):
    s = default_schedule
    x = rng.standard_normal((2, 2, 3))
    eps = rng.standard_normal(x.shape)
    z = NoiseDraw(0, 9, x.shape)
    sigma = 0.01
    out = ddim_step(x, 500, 400, s, eps, sigma=sigma, noise=z)
    ratio = s.signal_coef[400] / s.signal_coef[500]
    ref = ratio * (x - math.sqrt(s.noise_var[500]) * eps) + math.sqrt(s.noise_var[400] - sigma**2) * eps + sigma * z.sample()
    assert np.allclose(out, ref, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- plans


def test_default_plan(default_schedule):
    plan = make_pyramid_plan(default_schedule)
    assert plan.steps == (
        (1000, 4), (900, 4), (800, 4), (700, 4),
        (600, 2), (500, 2), (400, 2),
        (300, 1), (200, 1), (100, 1),
    )
    assert plan.coarse_to_fine
    assert not make_pyramid_plan(default_schedule, coarse_to_fine=False).coarse_to_fine


def test_plan_matches_training_bands(default_schedule):
    for t, f in make_pyramid_plan(default_schedule).steps:
        assert scale_for_timestep(t) == f


def test_plan_transitions_end_at_zero(default_schedule):
    tr = list(make_pyramid_plan(default_schedule).transitions())
    assert tr[0] == (1000, 4, 900, 4)
    assert tr[3] == (700, 4, 600, 2)
    assert tr[-1] == (100, 1, 0, 1)


def test_plan_validation(default_schedule):
    with pytest.raises(ValueError):
        make_pyramid_plan(default_schedule, 10, [1, 2, 3] + [1] * 7)
    with pytest.raises(ValueError):
        make_pyramid_plan(default_schedule, 5, DEFAULT_FACTORS)
    with pytest.raises(ValueError):
        PyramidPlan(steps=((100, 1), (200, 1)))
    with pytest.raises(ValueError, match="pad"):
        PyramidPlan(steps=((100, 4),), base_shape=(30, 32))


@pytest.mark.parametrize("t,f", [(1000, 4), (601, 4), (600, 2), (301, 2), (300, 1), (0, 1)])
def test_scale_for_timestep(t, f):
    assert scale_for_timestep(t) == f


# ---------------------------------------------------------------- cross-scale lift


def test_lift_same_scale_to_zero_is_identity(default_schedule, rng):
    x0 = rng.random((4, 4, 3))
    assert np.array_equal(cross_scale_lift(None, x0, 2, 2, 0, default_schedule, 0.0), x0)


def test_lift_upscales_then_renoises(default_schedule, rng):
    s = default_schedule
    x0 = rng.random((4, 4, 3))
    up = resize(x0, 8, 8, mode="bilinear").data
    eps = rng.standard_normal((8, 8, 3))
    out = cross_scale_lift(None, x0, 2, 1, 500, s, eps)
    assert np.allclose(out, s.signal_coef[500] * up + math.sqrt(s.noise_var[500]) * eps, rtol=0, atol=1e-14)


def test_lift_monte_carlo_mean(default_schedule):
    s = default_schedule
    x0 = np.full((2, 2, 1), 0.8)
    n = 4000
    draws = [cross_scale_lift(None, x0, 2, 1, 600, s, NoiseDraw(3, i, (4, 4, 1))) for i in range(n)]
    arr = np.stack(draws)
    se = math.sqrt(s.noise_var[600] / (n * 16))
    assert abs(arr.mean() - s.signal_coef[600] * 0.8) <= 4 * se


def test_lift_resizes_noise_draw(default_schedule):
    out = cross_scale_lift(None, np.zeros((4, 4, 3)), 4, 1, 100, default_schedule, NoiseDraw(0, 0, (4, 4, 3)))
    assert out.shape == (16, 16, 3)


# ---------------------------------------------------------------- full samplers


def test_oracle_pyramid_psnr(default_schedule):
    x0 = smooth_image(0)
    plan = make_pyramid_plan(default_schedule, base_shape=x0.shape)
    out = pyramid_sample(plan, OracleDenoiser(x0, default_schedule), None, default_schedule, seed=3, base_shape=x0.shape)
    assert out.shape == x0.shape and out.clamped
    assert psnr(out, x0) >= 45.0


def test_oracle_flat_is_exact(default_schedule):
    x0 = smooth_image(1, 32)
    out = flat_sample(default_schedule, OracleDenoiser(x0, default_schedule), None, seed=0, base_shape=x0.shape)
    assert np.max(np.abs(out.data - x0)) <= 1e-6


def test_pyramid_deterministic_per_seed(default_schedule):
    plan = make_pyramid_plan(default_schedule, base_shape=(16, 16))
    zero = FunctionDenoiser(lambda stacked, t: np.zeros(stacked.shape[:2] + (3,)))
    run = lambda seed: pyramid_sample(plan, zero, None, default_schedule, seed, base_shape=(16, 16), unit_init=True)
    assert np.array_equal(run(5).data, run(5).data)
    assert not np.array_equal(run(5).data, run(6).data)


def test_pyramid_trace_follows_plan(default_schedule):
    x0 = smooth_image(2, 16)
    plan = make_pyramid_plan(default_schedule, base_shape=x0.shape)
    _, trace = pyramid_sample(plan, OracleDenoiser(x0, default_schedule), None, default_schedule, 0,
                              base_shape=x0.shape, return_trace=True)
    assert trace == list(plan.transitions())


def test_function_denoiser_sees_thirteen_channels(default_schedule, rng):
    low = rng.random((16, 16, 3)) * 0.2
    cond = assemble_condition(low)
    seen = []

    def fn(stacked, t):
        seen.append((stacked.shape, t))
        return np.zeros(stacked.shape[:2] + (3,))

    x = rng.standard_normal((16, 16, 3))
    FunctionDenoiser(fn).predict(x, 700, cond)
    assert seen == [((16, 16, 13), 700)]

    def layout(stacked, t):
        assert np.array_equal(stacked[:, :, :3], low)
        assert np.array_equal(stacked[:, :, 3:7], cond.pos.data)
        assert np.array_equal(stacked[:, :, 7:10], cond.dehaze.data)
        assert np.array_equal(stacked[:, :, 10:], x)
        return np.zeros_like(x)

    FunctionDenoiser(layout).predict(x, 1, cond)


def test_pyramid_downscales_condition(default_schedule, rng):
    cond = assemble_condition(rng.random((16, 16, 3)) * 0.3)
    shapes = []

    def fn(stacked, t):
        shapes.append(stacked.shape)
        return np.zeros(stacked.shape[:2] + (3,))

    pyramid_sample(make_pyramid_plan(default_schedule), FunctionDenoiser(fn), cond, default_schedule, 0)
    assert shapes == [(4, 4, 13)] * 4 + [(8, 8, 13)] * 3 + [(16, 16, 13)] * 3


def test_wrong_denoiser_shape(default_schedule):
    bad = FunctionDenoiser(lambda stacked, t: np.zeros((1, 1, 3)))
    with pytest.raises(ValueError):
        flat_sample(default_schedule, bad, None, 0, base_shape=(8, 8))


def test_oracle_rejects_mismatched_grid(default_schedule):
    with pytest.raises(ValueError):
        OracleDenoiser(np.zeros((16, 16, 3)), default_schedule).predict(np.zeros((5, 5, 3)), 10)


_DEFAULT = build_schedule()
