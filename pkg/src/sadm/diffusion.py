"""Forward attenuation process and its closed-form posterior.

All operations are elementwise, so they accept a single ``H x W x C`` image or
any batch of them stacked along leading axes. ImageTensor inputs come back as
ImageTensor; plain arrays come back as arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .image import ImageTensor, as_array
from .schedule import NoiseSchedule

__all__ = [
    "NoiseDraw",
    "PosteriorParams",
    "stream_id",
    "forward_step",
    "forward_marginal",
    "recover_x0",
    "posterior_params",
    "posterior_mean",
    "posterior_step",
    "kl_weight",
]

_U64 = (1 << 64) - 1

PURPOSES = {"forward": 1, "marginal": 2, "posterior": 3, "lift": 4, "init": 5, "mc": 6}


def stream_id(t: int, purpose: str, block: int = 0) -> int:
    """Pack (purpose, t, block) into a substream id.

    Distinct purposes never share randomness, so a stepwise chain and a
    marginal draw at the same t stay independent unless a caller passes the
    same id on purpose. ``block`` lets Monte-Carlo runs shard samples
    into fixed-size blocks whose streams do not depend on the worker count.
    """
    return (PURPOSES[purpose] << 56) | ((block & 0xFFFFFF) << 32) | (t & 0xFFFFFFFF)


@dataclass(frozen=True)
class NoiseDraw:
    """A reproducible standard-normal field keyed by ``(seed, stream_id, shape)``."""

    seed: int
    stream_id: int
    shape: tuple

    def sample(self) -> np.ndarray:
        ss = np.random.SeedSequence([self.seed & _U64, self.stream_id & _U64])
        return np.random.Generator(np.random.PCG64(ss)).standard_normal(tuple(self.shape))


@dataclass(frozen=True)
class PosteriorParams:
    coef_xt: float
    coef_x0: float
    variance: float


def _noise_field(noise, shape) -> np.ndarray:
    if isinstance(noise, NoiseDraw):
        if tuple(noise.shape) != tuple(shape):
            raise ValueError(f"noise draw shape {noise.shape} != image shape {shape}")
        return noise.sample()
    arr = as_array(noise) if isinstance(noise, ImageTensor) else np.asarray(noise, dtype=np.float64)
    if arr.ndim == 0:
        return np.broadcast_to(arr, shape)
    if arr.shape != tuple(shape):
        raise ValueError(f"noise shape {arr.shape} != image shape {shape}")
    return arr


def _values(x) -> np.ndarray:
    return x.data if isinstance(x, ImageTensor) else np.asarray(x, dtype=np.float64)


def _like(x, out: np.ndarray):
    return ImageTensor(out) if isinstance(x, ImageTensor) else out


def forward_step(x_prev, t: int, schedule: NoiseSchedule, noise):
    """One forward step ``k_t a_t x_{t-1} + k_t b_t eps``; never clamps."""
    t = schedule.check_t(t, low=1)
    x = _values(x_prev)
    eps = _noise_field(noise, x.shape)
    k, a = schedule.k[t], schedule.a[t]
    return _like(x_prev, k * a * x + k * math.sqrt(schedule.b_sq[t]) * eps)


def forward_marginal(x0, t: int, schedule: NoiseSchedule, noise):
    """Jump straight from x0 to step t: ``S_t x0 + sqrt(V_t) eps``."""
    t = schedule.check_t(t)
    x = _values(x0)
    if t == 0:
        return _like(x0, x.copy())
    eps = _noise_field(noise, x.shape)
    return _like(x0, schedule.signal_coef[t] * x + math.sqrt(schedule.noise_var[t]) * eps)


def recover_x0(x_t, t: int, schedule: NoiseSchedule, noise_hat):
    """Invert the marginal given a noise estimate.

    The division by ``S_t`` is done as a multiplication by
    ``exp(-log S_t)``, which stays finite where ``kbar_t`` alone would not.
    """
    t = schedule.check_t(t)
    x = _values(x_t)
    eps = _noise_field(noise_hat, x.shape)
    inv_signal = schedule.signal_ratio(0, t)
    return _like(x_t, (x - math.sqrt(schedule.noise_var[t]) * eps) * inv_signal)


def _posterior_denominator(t: int, schedule: NoiseSchedule) -> float:
    # k_t^2 - kbar_{t-1}^2 abar_t^2, rewritten through the recurrence as
    # b_t^2 + a_t^2 V_{t-1} so small t does not cancel
    return schedule.b_sq[t] + schedule.a[t] ** 2 * schedule.noise_var[t - 1]


def posterior_params(t: int, schedule: NoiseSchedule) -> PosteriorParams:
    """Coefficients of q(x_{t-1} | x_t, x_0).

    At t=1 the convention kbar_0 = abar_0 = 1 gives ``coef_xt = 0``,
    ``coef_x0 = 1`` and zero variance.
    """
    t = schedule.check_t(t, low=1)
    denom = _posterior_denominator(t, schedule)
    v_prev = schedule.noise_var[t - 1]
    b_sq = schedule.b_sq[t]
    return PosteriorParams(
        coef_xt=schedule.a[t] * v_prev / (schedule.k[t] * denom),
        coef_x0=b_sq * schedule.signal_coef[t - 1] / denom,
        variance=b_sq * v_prev / denom,
    )


def posterior_mean(x_t, t: int, schedule: NoiseSchedule, noise_hat):
    """Posterior mean with x0 eliminated in favour of the noise estimate."""
    t = schedule.check_t(t, low=1)
    x = _values(x_t)
    eps = _noise_field(noise_hat, x.shape)
    k, a = schedule.k[t], schedule.a[t]
    denom = _posterior_denominator(t, schedule)
    return _like(x_t, x / (k * a) - schedule.b_sq[t] / (a * math.sqrt(denom)) * eps)


def posterior_step(x_t, t: int, schedule: NoiseSchedule, noise_hat, noise=None):
    """Ancestral reverse step ``mu_theta + sigma_q z``.

    ``noise=None`` means z = 0. At t=1 z is ignored. Kept for checking the
    derivation; deployment sampling goes through the DDIM sampler.
    """
    mean = _values(posterior_mean(x_t, t, schedule, noise_hat))
    if noise is not None and t > 1:
        var = posterior_params(t, schedule).variance
        mean = mean + math.sqrt(var) * _noise_field(noise, mean.shape)
    return _like(x_t, mean)


def kl_weight(t: int, schedule: NoiseSchedule) -> float:
    """Weight in front of ``||f_theta - eps||^2`` in the per-step KL term.

    Diagnostic only: training uses the unweighted L1 noise loss. At t=1 the
    posterior variance is zero and the weight is ``inf``.
    """
    t = schedule.check_t(t, low=1)
    var = posterior_params(t, schedule).variance
    if var == 0.0:
        return math.inf
    b_sq, a = schedule.b_sq[t], schedule.a[t]
    return b_sq**2 / (2.0 * var * a**2 * _posterior_denominator(t, schedule))
