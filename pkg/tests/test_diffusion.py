import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sadm.diffusion import (
    NoiseDraw,
    forward_marginal,
    forward_step,
    kl_weight,
    posterior_mean,
    posterior_params,
    posterior_step,
    recover_x0,
    stream_id,
)
from sadm.image import ImageTensor
from sadm.sampler import OracleDenoiser
from sadm.schedule import build_schedule


def _gaussian_posterior(s, t):
    """Bayes rule for x_{t-1} | x_t, x0 from the two Gaussian factors.

    Prior N(S_{t-1} x0, V_{t-1}) with V recomputed from k^4 - S^2 in mpmath;
    likelihood N(k a x_{t-1}, k^2 b^2).
    """
    mpmath.mp.dps = 50
    s_prev = mpmath.mpf(1)
    for j in range(1, t):
        s_prev *= mpmath.mpf(s.k[j]) * mpmath.mpf(s.a[j])
    v_prev = mpmath.mpf(s.k[t - 1]) ** 4 - s_prev**2
    k, a, b2 = mpmath.mpf(s.k[t]), mpmath.mpf(s.a[t]), mpmath.mpf(s.b_sq[t])
    prec = 1 / v_prev + (k * a) ** 2 / (k * k * b2)
    var = 1 / prec
    return float(var * k * a / (k * k * b2)), float(var * s_prev / v_prev), float(var)


# ---------------------------------------------------------------- noise streams


def test_noise_draw_is_reproducible():
    d = NoiseDraw(7, stream_id(10, "forward"), (4, 4, 3))
    assert np.array_equal(d.sample(), d.sample())
    other = NoiseDraw(7, stream_id(10, "marginal"), (4, 4, 3))
    assert not np.array_equal(d.sample(), other.sample())


def test_stream_ids_are_distinct():
    ids = {stream_id(t, p, b) for t in range(0, 1001, 50) for p in ("forward", "lift", "mc") for b in range(3)}
    assert len(ids) == 21 * 3 * 3


# ---------------------------------------------------------------- forward process


def test_zero_noise_forward_step(default_schedule, rng):
    s = default_schedule
    x = rng.random((3, 4, 3))
    for t in (1, 500, 1000):
        assert np.array_equal(forward_step(x, t, s, 0.0), s.k[t] * s.a[t] * x)


def test_zero_noise_marginal_matches_chained_steps(short_schedule, rng):
    s = short_schedule
    x0 = rng.random((5, 5, 3))
    x = x0
    for t in range(1, s.T + 1):
        x = forward_step(x, t, s, 0.0)
        assert np.allclose(x, forward_marginal(x0, t, s, 0.0), rtol=1e-12, atol=0)


def test_marginal_at_zero_is_copy(default_schedule, rng):
    x0 = rng.random((2, 2, 3))
    out = forward_marginal(x0, 0, default_schedule, np.ones_like(x0))
    assert np.array_equal(out, x0) and out is not x0


def test_image_tensor_in_image_tensor_out(default_schedule, rng):
    img = ImageTensor(rng.random((4, 4, 3)))
    out = forward_marginal(img, 300, default_schedule, NoiseDraw(0, 1, (4, 4, 3)))
    assert isinstance(out, ImageTensor)
    assert isinstance(forward_marginal(img.data, 300, default_schedule, 0.0), np.ndarray)


def test_forward_never_clamps(default_schedule):
    x = np.ones((4, 4, 3))
    out = forward_marginal(x, 1000, default_schedule, NoiseDraw(3, 5, x.shape))
    assert out.min() < 0 or out.max() > 1


def test_noise_shape_mismatch(default_schedule):
    with pytest.raises(ValueError):
        forward_step(np.zeros((2, 2, 3)), 5, default_schedule, np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        forward_marginal(np.zeros((2, 2, 3)), 5, default_schedule, NoiseDraw(0, 0, (3, 3, 3)))


def test_timestep_bounds(default_schedule):
    with pytest.raises(ValueError):
        forward_step(np.zeros(3), 0, default_schedule, 0.0)
    with pytest.raises(ValueError):
        forward_marginal(np.zeros(3), 1001, default_schedule, 0.0)


def _energy(samples_sq):
    return samples_sq.mean(), samples_sq.std(ddof=1) / math.sqrt(len(samples_sq))


@pytest.mark.parametrize("t", [10, 100, 1000])
def test_energy_law_marginal(default_schedule, t):
    s = default_schedule
    n, d = 10_000, 8
    x0 = np.where(np.random.default_rng(t).random((n, d)) < 0.5, -1.0, 1.0)
    xt = forward_marginal(x0, t, s, NoiseDraw(11, stream_id(t, "mc"), (n, d)).sample())
    mean, se = _energy((xt**2).mean(axis=1))
    assert abs(mean - s.k[t] ** 4) <= 4 * se


def test_energy_law_stepwise(default_schedule):
    s = default_schedule
    n, d, t_end = 10_000, 4, 100
    rng = np.random.default_rng(5)
    x = rng.uniform(-math.sqrt(3), math.sqrt(3), (n, d))
    for t in range(1, t_end + 1):
        x = forward_step(x, t, s, NoiseDraw(5, stream_id(t, "forward"), (n, d)))
    mean, se = _energy((x**2).mean(axis=1))
    assert abs(mean - s.k[t_end] ** 4) <= 4 * se


# ---------------------------------------------------------------- inversion


@pytest.mark.parametrize("t", [1, 10, 300, 999])
def test_recover_x0_inverts_marginal(default_schedule, rng, t):
    x0 = rng.random((6, 6, 3))
    eps = rng.standard_normal(x0.shape)
    xt = forward_marginal(x0, t, default_schedule, eps)
    assert np.max(np.abs(recover_x0(xt, t, default_schedule, eps) - x0)) <= 1e-9


def test_recover_x0_at_horizon(default_schedule, rng):
    # S_T ~ 2.9e-6 amplifies rounding in x_t by ~1/S_T
    x0 = rng.random((6, 6, 3))
    eps = rng.standard_normal(x0.shape)
    xt = forward_marginal(x0, 1000, default_schedule, eps)
    assert np.max(np.abs(recover_x0(xt, 1000, default_schedule, eps) - x0)) <= 1e-6


# ---------------------------------------------------------------- posterior


@pytest.mark.parametrize("t", [2, 3, 50, 291, 700, 1000])
def test_posterior_params_match_bayes_rule(default_schedule, t):
    p = posterior_params(t, default_schedule)
    coef_xt, coef_x0, var = _gaussian_posterior(default_schedule, t)
    assert p.coef_xt == pytest.approx(coef_xt, rel=1e-9)
    assert p.coef_x0 == pytest.approx(coef_x0, rel=1e-9)
    assert p.variance == pytest.approx(var, rel=1e-9)


def test_posterior_at_first_step(default_schedule):
    p = posterior_params(1, default_schedule)
    assert (p.coef_xt, p.coef_x0, p.variance) == (0.0, 1.0, 0.0)
    assert kl_weight(1, default_schedule) == math.inf


def test_posterior_combined_equals_reduced_mean(default_schedule, rng):
    s = default_schedule
    worst = 0.0
    for t in range(1, s.T + 1):
        x0 = rng.random((2, 3, 3))
        eps = rng.standard_normal(x0.shape)
        xt = forward_marginal(x0, t, s, eps)
        p = posterior_params(t, s)
        combined = p.coef_xt * xt + p.coef_x0 * recover_x0(xt, t, s, eps)
        worst = max(worst, float(np.max(np.abs(combined - posterior_mean(xt, t, s, eps)))))
    assert worst <= 1e-10


def test_literal_denominator_agrees_where_it_is_stable(default_schedule):
    s = default_schedule
    for t in (200, 500, 1000):
        literal = s.k[t] ** 2 - (s.k_bar[t - 1] * s.a_bar[t]) ** 2
        p = posterior_params(t, s)
        assert p.variance == pytest.approx(s.b_sq[t] * s.noise_var[t - 1] / literal, rel=1e-8)


def test_posterior_degenerates_to_ddpm(ddpm_schedule):
    s = ddpm_schedule
    beta = s.b_sq
    alpha_bar = np.cumprod(np.concatenate([[1.0], 1.0 - beta[1:]]))
    for t in (2, 10, 100, 999, 1000):
        p = posterior_params(t, s)
        den = 1.0 - alpha_bar[t]
        assert p.coef_x0 == pytest.approx(math.sqrt(alpha_bar[t - 1]) * beta[t] / den, rel=1e-10)
        assert p.coef_xt == pytest.approx(math.sqrt(1 - beta[t]) * (1 - alpha_bar[t - 1]) / den, rel=1e-10)
        assert p.variance == pytest.approx(beta[t] * (1 - alpha_bar[t - 1]) / den, rel=1e-10)


def test_ancestral_chain_with_oracle_returns_x0(short_schedule, rng):
    s = short_schedule
    x0 = rng.random((8, 8, 3))
    oracle = OracleDenoiser(x0, s)
    x = forward_marginal(x0, s.T, s, NoiseDraw(1, stream_id(s.T, "init"), x0.shape))
    for t in range(s.T, 0, -1):
        x = posterior_step(x, t, s, oracle.predict(x, t), NoiseDraw(1, stream_id(t, "posterior"), x0.shape))
        assert np.all(np.isfinite(x))
    assert -0.5 <= x.min() and x.max() <= 1.5
    assert np.max(np.abs(x - x0)) <= 1e-9


def test_posterior_step_without_noise_is_mean(default_schedule, rng):
    x = rng.random((3, 3, 3))
    eps = rng.standard_normal(x.shape)
    assert np.array_equal(posterior_step(x, 400, default_schedule, eps), posterior_mean(x, 400, default_schedule, eps))


_SCHED = build_schedule()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 1000))
def test_kl_weight_positive(t):
    w = kl_weight(t, _SCHED)
    assert w > 0 and math.isfinite(w)
