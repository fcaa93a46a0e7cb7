"""Identity and Monte-Carlo checks behind ``sadm verify``.

Every check reports the measured error next to its tolerance. Monte-Carlo
samples are drawn in fixed blocks of :data:`BLOCK` with one substream per
block, so results do not depend on how the blocks are distributed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import diffusion as dif
from .diffusion import NoiseDraw, stream_id
from .image import rgb_to_ycbcr
from .prior import dehaze_explicit, dehaze_prior, hist_equalize
from .quality import (
    LossConfig,
    PoolingExtractor,
    bhattacharyya_coefficient,
    gaussian_window,
    gtmean_loss,
    psnr,
    ssim,
    total_loss,
)
from .sampler import (
    OracleDenoiser,
    ddim_coefficients,
    ddim_step,
    flat_sample,
    make_pyramid_plan,
    pyramid_sample,
)
from .schedule import NoiseSchedule, build_schedule

SUITES = ("schedule", "diffusion", "ddim", "prior", "losses", "metrics")
BLOCK = 1000


@dataclass
class Check:
    name: str
    measured: float
    tolerance: float
    passed: bool

    @classmethod
    def at_most(cls, name, measured, tolerance):
        measured = float(measured)
        return cls(name, measured, float(tolerance), bool(measured <= tolerance))

    @classmethod
    def at_least(cls, name, measured, tolerance):
        measured = float(measured)
        return cls(name, measured, float(tolerance), bool(measured >= tolerance))


def mc_normal(seed: int, t: int, purpose: str, n: int, shape: tuple) -> np.ndarray:
    blocks = []
    for b in range(math.ceil(n / BLOCK)):
        size = min(BLOCK, n - b * BLOCK)
        blocks.append(NoiseDraw(seed, stream_id(t, purpose, block=b), (size, *shape)).sample())
    return np.concatenate(blocks, axis=0)


def telescoping_sum(schedule: NoiseSchedule, t: int) -> float:
    """Brute-force sum of the variance expansion terms of x_t for unit-energy x0."""
    k2 = [schedule.k[s] ** 2 for s in range(t + 1)]
    a2 = [schedule.a[s] ** 2 for s in range(t + 1)]
    total = 1.0
    for s in range(1, t + 1):
        total *= k2[s] * a2[s]
    for j in range(1, t + 1):
        term = schedule.b_sq[j]
        for s in range(j, t + 1):
            term *= k2[s]
        for s in range(j + 1, t + 1):
            term *= a2[s]
        total += term
    return total


def ddpm_reference(b_sq: np.ndarray):
    """Textbook DDPM quantities from a beta ramp: alpha, alpha_bar."""
    betas = np.asarray(b_sq[1:])
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    return np.concatenate([[1.0], alphas]), alpha_bar


# ---------------------------------------------------------------- suites


def check_schedule(schedule: NoiseSchedule, samples: int, seed: int) -> list[Check]:
    s = schedule
    t = np.arange(1, s.T + 1)
    lhs = s.k[t - 1] ** 4 * s.a[t] ** 2 + s.b_sq[t]
    rec = np.max(np.abs(lhs - s.k[t] ** 2) / s.k[t] ** 2)

    tele = max(abs(telescoping_sum(s, i) - s.k[i] ** 4) for i in range(1, min(s.T, 64) + 1))

    sig = np.max(np.abs(s.signal_coef[t] - s.k[t] * s.a[t] * s.signal_coef[t - 1]))
    var_step = np.max(np.abs(s.noise_var[t] - (s.k[t] ** 2 * s.a[t] ** 2 * s.noise_var[t - 1] + s.k[t] ** 2 * s.b_sq[t])))
    var_closed = np.max(np.abs(s.noise_var - (s.k**4 - s.signal_coef**2)))

    cfg = s.config
    ddpm = build_schedule(replace(cfg, degenerate_ddpm=True))
    alphas, alpha_bar = ddpm_reference(ddpm.b_sq)
    ddpm_err = max(
        np.max(np.abs(ddpm.signal_coef**2 - alpha_bar)),
        np.max(np.abs(ddpm.noise_var - (1.0 - alpha_bar))),
        np.max(np.abs(ddpm.a**2 - alphas)),
    )

    sweep = [build_schedule(replace(cfg, attenuation_ratio=r, degenerate_ddpm=False), on_infeasible="collapse")
             for r in (0.99, 0.999, 0.9999)]
    order_violations = int(np.sum(~(sweep[0].signal_coef[1:] < sweep[1].signal_coef[1:]))
                           + np.sum(~(sweep[1].signal_coef[1:] < sweep[2].signal_coef[1:])))

    return [
        Check.at_most("recurrence_identity_rel", rec, 1e-12),
        Check.at_most("telescoping_variance_t<=64", tele, 1e-10),
        Check.at_least("noise_var_min", float(np.min(s.noise_var)), 0.0),
        Check.at_most("signal_coef_one_step", sig, 1e-12),
        Check.at_most("noise_var_one_step", var_step, 1e-12),
        Check.at_most("noise_var_closed_form", var_closed, 1e-12),
        Check.at_most("ddpm_degeneration", ddpm_err, 1e-10),
        Check.at_most("ratio_sweep_order_violations", order_violations, 0),
    ]


def check_diffusion(schedule: NoiseSchedule, samples: int, seed: int) -> list[Check]:
    s = schedule
    n = samples
    checks = []

    # energy law: E x_t^2 = k_t^4 for unit-second-moment x0
    shape = (4, 4, 3)
    worst = 0.0
    for t in (10, 100, 500, 1000):
        if t > s.T:
            continue
        eps = mc_normal(seed, t, "mc", n, shape)
        xt = dif.forward_marginal(np.ones((n, *shape)), t, s, eps)
        energy = np.mean(xt**2, axis=(1, 2, 3))
        se = energy.std(ddof=1) / math.sqrt(n)
        worst = max(worst, abs(energy.mean() - s.k[t] ** 4) / se)
    checks.append(Check.at_most("energy_law_max_z", worst, 4.0))

    # chained steps vs marginal, per-pixel mean and variance
    shape = (4, 4, 1)
    x = np.full((n, *shape), 0.5)
    worst = 0.0
    targets = [t for t in (1, 5, 50) if t <= s.T]
    for t in range(1, max(targets) + 1):
        x = dif.forward_step(x, t, s, mc_normal(seed, t, "forward", n, shape))
        if t in targets:
            mean_true = s.signal_coef[t] * 0.5
            var_true = s.noise_var[t]
            z_mean = np.abs(x.mean(axis=0) - mean_true) / math.sqrt(var_true / n)
            z_var = np.abs(x.var(axis=0, ddof=1) - var_true) / (var_true * math.sqrt(2.0 / (n - 1)))
            worst = max(worst, z_mean.max(), z_var.max())
    checks.append(Check.at_most("stepwise_vs_marginal_max_z", worst, 4.0))

    # exact inversion
    rng = np.random.default_rng(seed)
    x0 = rng.random((8, 8, 3))
    err_mid = err_end = 0.0
    for t in range(1, s.T + 1):
        eps = NoiseDraw(seed, stream_id(t, "marginal"), x0.shape).sample()
        back = dif.recover_x0(dif.forward_marginal(x0, t, s, eps), t, s, eps)
        e = np.max(np.abs(back - x0))
        if t <= 500:
            err_mid = max(err_mid, e)
        else:
            err_end = max(err_end, e)
    checks.append(Check.at_most("inversion_t<=500", err_mid, 1e-9))
    if s.T > 500:
        checks.append(Check.at_most("inversion_t>500", err_end, 1e-6))

    # two forms of the posterior mean
    worst = 0.0
    for t in range(1, s.T + 1):
        eps = NoiseDraw(seed, stream_id(t, "posterior"), x0.shape).sample()
        xt = dif.forward_marginal(x0, t, s, eps)
        pp = dif.posterior_params(t, s)
        combined = pp.coef_xt * xt + pp.coef_x0 * x0
        reduced = dif.posterior_mean(xt, t, s, eps)
        worst = max(worst, np.max(np.abs(combined - reduced)))
    checks.append(Check.at_most("posterior_mean_identity", worst, 1e-10))

    variances = [dif.posterior_params(t, s).variance for t in range(1, s.T + 1)]
    weights = [dif.kl_weight(t, s) for t in range(2, s.T + 1)]
    checks.append(Check.at_least("posterior_variance_min", min(variances), 0.0))
    checks.append(Check.at_least("kl_weight_min_t>=2", min(weights) if weights else 1.0, 1e-300))
    return checks


def check_ddim(schedule: NoiseSchedule, samples: int, seed: int) -> list[Check]:
    s = schedule
    T = s.T
    rng = np.random.default_rng(seed)
    x0 = rng.random((64, 64, 3))
    eps = NoiseDraw(seed, stream_id(T, "marginal"), x0.shape).sample()

    def on_manifold(t):
        return dif.forward_marginal(x0, t, s, eps)

    pairs = [(round(T * 1.0), round(T * 0.7)), (round(T * 0.7), round(T * 0.3)), (round(T * 0.3), 0)]
    manifold = max(np.max(np.abs(ddim_step(on_manifold(t), t, p, s, eps) - on_manifold(p))) for t, p in pairs if t > p)

    t, q, p = T, round(T * 0.5), round(T * 0.2)
    direct = ddim_step(on_manifold(t), t, p, s, eps)
    via = ddim_step(ddim_step(on_manifold(t), t, q, s, eps), q, p, s, eps)
    skip = np.max(np.abs(direct - via))

    mn = 0.0
    for i in range(1, T + 1):
        m, n = ddim_coefficients(i, i - 1, s)
        mn = max(mn, abs(m + n * s.signal_coef[i] - s.signal_coef[i - 1]),
                 abs(n * n * s.noise_var[i] - s.noise_var[i - 1]))

    oracle = OracleDenoiser(x0, s)
    flat = flat_sample(s, oracle, None, seed, steps=min(10, T), channels=3, base_shape=(64, 64))
    flat_err = np.max(np.abs(flat.data - x0))

    plan = make_pyramid_plan(s, min(10, T), base_shape=(64, 64)) if T >= 10 else None
    checks = [
        Check.at_most("ddim_manifold_consistency", manifold, 1e-9),
        Check.at_most("ddim_step_skipping", skip, 1e-9),
        Check.at_most("ddim_mn_equations", mn, 1e-12),
        Check.at_most("flat_oracle_max_error", flat_err, 1e-6),
    ]
    if plan is not None:
        smooth = _smooth_image(seed, 64)
        py_oracle = OracleDenoiser(smooth, s)
        out1 = pyramid_sample(plan, py_oracle, None, s, seed, channels=3)
        out2 = pyramid_sample(plan, py_oracle, None, s, seed, channels=3)
        checks.append(Check.at_least("pyramid_oracle_psnr_db", min(psnr(out1, smooth), 99.0), 45.0))
        checks.append(Check.at_most("pyramid_determinism", np.max(np.abs(out1.data - out2.data)), 0.0))

    if not s.config.degenerate_ddpm:
        ddpm = build_schedule(replace(s.config, degenerate_ddpm=True))
        _, alpha_bar = ddpm_reference(ddpm.b_sq)
        worst = 0.0
        for t, p in pairs:
            if t <= p:
                continue
            xt = np.sqrt(alpha_bar[t]) * x0 + np.sqrt(1 - alpha_bar[t]) * eps
            x0_hat = (xt - np.sqrt(1 - alpha_bar[t]) * eps) / np.sqrt(alpha_bar[t])
            ref = np.sqrt(alpha_bar[p]) * x0_hat + np.sqrt(1 - alpha_bar[p]) * eps
            worst = max(worst, np.max(np.abs(ddim_step(xt, t, p, ddpm, eps) - ref)))
        checks.append(Check.at_most("ddim_ddpm_degeneration", worst, 1e-10))
    return checks


def _smooth_image(seed: int, size: int) -> np.ndarray:
    """Band-limited test image: a few low-frequency cosines per channel in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    chans = []
    for _ in range(3):
        img = np.full_like(yy, 0.5)
        for _ in range(3):
            fy, fx = rng.integers(0, 3, size=2)
            img += 0.1 * rng.uniform(-1, 1) * np.cos(np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
        chans.append(img)
    return np.clip(np.stack(chans, axis=2), 0.0, 1.0)


def check_prior(schedule: NoiseSchedule, samples: int, seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    n_img = min(max(samples, 1), 1000)
    worst = 0.0
    lift_violations = 0
    for _ in range(n_img):
        x = rng.random((8, 8, 3)) * rng.uniform(0.05, 1.0)
        worst = max(worst, np.max(np.abs(dehaze_prior(x, clip=False).data - dehaze_explicit(x).data)))
        if dehaze_prior(x, clip=False).data.mean() < x.mean() - 1e-15:
            lift_violations += 1
    gray = dehaze_prior(np.full((4, 4, 3), 0.5)).data
    gray_err = np.max(np.abs(gray - 0.5 / 0.875))

    x = rng.random((32, 32, 3))
    eq = hist_equalize(x).data
    order = np.argsort(x[:, :, 0], axis=None)
    mono = int(np.sum(np.diff(eq[:, :, 0].ravel()[order]) < 0))
    return [
        Check.at_most("dehaze_simplification", worst, 1e-12),
        Check.at_most("dehaze_uniform_gray", gray_err, 1e-12),
        Check.at_most("dehaze_brightness_lift_violations", lift_violations, 0),
        Check.at_most("hiseq_monotonicity_violations", mono, 0),
    ]


def check_losses(schedule: NoiseSchedule, samples: int, seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    cfg = LossConfig()
    ext = PoolingExtractor()
    w_range = 0.0
    self_w = 0.0
    idempotence = 0.0
    decomposition = 0.0
    for _ in range(50):
        fx = rng.random((16, 16, 3)) * rng.uniform(0.1, 1.0) + 1e-3
        y = rng.random((16, 16, 3))
        _, lam, w = gtmean_loss(fx, y, cfg)
        w_range = max(w_range, max(0.0, w - 1.0, -w))
        p = rng.random(cfg.hist_bins)
        p /= p.sum()
        self_w = max(self_w, abs(bhattacharyya_coefficient(p, p) - 1.0))
        _, lam2, _ = gtmean_loss(lam * fx, y, cfg)
        idempotence = max(idempotence, abs(lam2 - 1.0))
        eps, eps_hat = rng.standard_normal((2, 16, 16, 3))
        rep = total_loss(fx, y, eps_hat, eps, ext, cfg)
        decomposition = max(decomposition, abs(rep.total - (rep.l_gt + rep.l_p + rep.l1_noise)))
    y = rng.random((16, 16, 3))
    eps = rng.standard_normal((16, 16, 3))
    perfect = total_loss(y, y, eps, eps, ext, cfg).total
    return [
        Check.at_most("bhattacharyya_out_of_range", w_range, 0.0),
        Check.at_most("bhattacharyya_self", self_w, 1e-12),
        Check.at_most("brightness_alignment_idempotence", idempotence, 1e-12),
        Check.at_most("total_loss_decomposition", decomposition, 0.0),
        Check.at_most("perfect_prediction_total", perfect, 0.0),
    ]


def reference_ssim(a: np.ndarray, b: np.ndarray, window=11, sigma=1.5, k1=0.01, k2=0.03, peak=1.0) -> float:
    """Window-by-window scalar SSIM, for cross-checking the vectorised one."""
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    h, w, ch = a.shape
    total, count = 0.0, 0
    for c in range(ch):
        acc = 0.0
        for i in range(h - window + 1):
            for j in range(w - window + 1):
                pa = a[i : i + window, j : j + window, c]
                pb = b[i : i + window, j : j + window, c]
                ma, mb = float(np.sum(g * pa)), float(np.sum(g * pb))
                va = float(np.sum(g * (pa - ma) ** 2))
                vb = float(np.sum(g * (pb - mb) ** 2))
                cov = float(np.sum(g * (pa - ma) * (pb - mb)))
                acc += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
                count += 1
        total += acc
    return total / count


def check_metrics(schedule: NoiseSchedule, samples: int, seed: int) -> list[Check]:
    rng = np.random.default_rng(seed)
    a = rng.random((16, 16, 3))
    b = np.clip(a + 0.05 * rng.standard_normal(a.shape), 0, 1)
    psnr_err = abs(psnr(np.zeros((4, 4, 1)), np.full((4, 4, 1), 0.1)) - 20.0)
    return [
        Check.at_most("psnr_closed_form", psnr_err, 1e-9),
        Check.at_most("ssim_self", abs(ssim(a, a) - 1.0), 0.0),
        Check.at_most("ssim_vs_scalar_reference", abs(ssim(a, b) - reference_ssim(a, b)), 1e-6),
        Check.at_most("ycbcr_white_point", float(np.max(np.abs(rgb_to_ycbcr(np.ones((1, 1, 3))).data - [1, 0.5, 0.5]))), 1e-12),
    ]


RUNNERS = {
    "schedule": check_schedule,
    "diffusion": check_diffusion,
    "ddim": check_ddim,
    "prior": check_prior,
    "losses": check_losses,
    "metrics": check_metrics,
}


def run_suite(suite: str, schedule: NoiseSchedule, samples: int = 10_000, seed: int = 0) -> dict:
    names = SUITES if suite == "all" else (suite,)
    checks = []
    for name in names:
        for c in RUNNERS[name](schedule, samples, seed):
            c.name = f"{name}.{c.name}"
            checks.append(c)
    return {
        "suite": suite,
        "checks": [asdict(c) for c in checks],
        "passed": all(c.passed for c in checks),
        "seed": seed,
        "samples": samples,
        "schedule_config": schedule.config.to_dict(),
    }
