"""Generalised DDIM sampling under the attenuation schedule, plus pyramid sampling.

The jump from step t to any earlier step p is

    x_p = (S_p / S_t) (x_t - sqrt(V_t) eps) + sqrt(V_p - sigma^2) eps + sigma z

with ``S`` the marginal signal coefficient and ``V`` the marginal noise
variance. ``sigma = 0`` makes it deterministic.

Denoisers receive the condition stack in channel order ``low[3], pos[n],
dehaze[3]`` (dehaze may be absent); a network sees that stack with the 3
noisy channels appended last.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .diffusion import NoiseDraw, forward_marginal, recover_x0, stream_id
from .image import ImageTensor, as_array, box_downscale, clamp, resize
from .schedule import NoiseSchedule

__all__ = [
    "DEFAULT_FACTORS",
    "ConditionStack",
    "Denoiser",
    "OracleDenoiser",
    "FunctionDenoiser",
    "PyramidPlan",
    "ddim_coefficients",
    "ddim_step",
    "make_pyramid_plan",
    "cross_scale_lift",
    "pyramid_sample",
    "flat_sample",
    "scale_for_timestep",
]

DEFAULT_FACTORS = (1, 1, 1, 2, 2, 2, 4, 4, 4, 4)
ALLOWED_FACTORS = (1, 2, 4)


@dataclass(frozen=True, eq=False)
class ConditionStack:
    low: ImageTensor
    pos: ImageTensor
    dehaze: ImageTensor | None = None
    extras: tuple = field(default=())

    def __post_init__(self):
        hw = self.low.shape[:2]
        for name, member in self.members():
            if member.shape[:2] != hw:
                raise ValueError(f"condition member {name} is {member.shape[:2]}, expected {hw}")

    def members(self):
        out = [("low", self.low), ("pos", self.pos)]
        if self.dehaze is not None:
            out.append(("dehaze", self.dehaze))
        out.extend((f"extra{i}", e) for i, e in enumerate(self.extras))
        return out

    @property
    def hw(self) -> tuple[int, int]:
        return self.low.shape[:2]

    @property
    def channels(self) -> int:
        return sum(m.channels for _, m in self.members())

    def as_array(self) -> np.ndarray:
        return np.concatenate([m.data for _, m in self.members()], axis=2)

    def downscale(self, factor: int) -> "ConditionStack":
        if factor == 1:
            return self
        return ConditionStack(
            low=box_downscale(self.low, factor),
            pos=box_downscale(self.pos, factor),
            dehaze=None if self.dehaze is None else box_downscale(self.dehaze, factor),
            extras=tuple(box_downscale(e, factor) for e in self.extras),
        )


class Denoiser(Protocol):
    def predict(self, x_t: np.ndarray, t: int, condition: ConditionStack | None) -> np.ndarray:
        """Return the predicted noise, same shape as ``x_t``."""
        ...


class OracleDenoiser:
    """Returns the exact marginal noise implied by a known clean image.

    When ``x_t`` is smaller than ``x0_true`` by an integer factor the clean
    image is box-downscaled to match, which is what a pyramid sampler needs.
    """

    def __init__(self, x0_true, schedule: NoiseSchedule):
        self.x0_true = as_array(x0_true)
        self.schedule = schedule
        self._scaled = {1: self.x0_true}

    def clean_at(self, shape) -> np.ndarray:
        h = self.x0_true.shape[0]
        if h % shape[0]:
            raise ValueError(f"cannot match oracle image {self.x0_true.shape} to {shape}")
        factor = h // shape[0]
        if factor not in self._scaled:
            self._scaled[factor] = box_downscale(self.x0_true, factor).data
        x0 = self._scaled[factor]
        if x0.shape != tuple(shape):
            raise ValueError(f"oracle image at factor {factor} is {x0.shape}, x_t is {shape}")
        return x0

    def predict(self, x_t, t, condition=None):
        t = self.schedule.check_t(t, low=1)
        x = as_array(x_t)
        x0 = self.clean_at(x.shape)
        s = self.schedule
        return (x - s.signal_coef[t] * x0) / math.sqrt(s.noise_var[t])


class FunctionDenoiser:
    """Adapts ``fn(stacked, t) -> eps`` where ``stacked`` is the condition
    channels followed by the noisy image (13 channels with the defaults)."""

    def __init__(self, fn: Callable[[np.ndarray, int], np.ndarray]):
        self.fn = fn

    def predict(self, x_t, t, condition):
        x = as_array(x_t)
        stacked = x if condition is None else np.concatenate([condition.as_array(), x], axis=2)
        eps = np.asarray(self.fn(stacked, t), dtype=np.float64)
        if eps.shape != x.shape:
            raise ValueError(f"denoiser returned shape {eps.shape}, expected {x.shape}")
        return eps


# ---------------------------------------------------------------- DDIM


def _check_pair(t: int, p: int, schedule: NoiseSchedule) -> tuple[int, int]:
    t = schedule.check_t(t, low=1)
    p = schedule.check_t(p)
    if not p < t:
        raise ValueError(f"DDIM target step p={p} must precede t={t}")
    return t, p


def ddim_coefficients(t: int, p: int, schedule: NoiseSchedule, sigma: float = 0.0) -> tuple[float, float]:
    """``(m, n)`` with ``x_p = m x0 + n x_t + sigma z``.

    They satisfy ``m + n S_t = S_p`` and ``n^2 V_t + sigma^2 = V_p``.
    """
    t, p = _check_pair(t, p, schedule)
    rest = schedule.noise_var[p] - sigma**2
    if rest < -1e-15 * max(schedule.noise_var[p], 1.0):
        raise ValueError(f"sigma^2={sigma**2:.6g} exceeds the marginal variance {schedule.noise_var[p]:.6g} at p={p}")
    n = math.sqrt(max(rest, 0.0)) / math.sqrt(schedule.noise_var[t])
    m = schedule.signal_coef[p] - schedule.signal_coef[t] * n
    return m, n


def ddim_step(x_t, t: int, p: int, schedule: NoiseSchedule, noise_hat, sigma: float = 0.0, noise=None):
    """Jump from step t to step p < t.

    With ``p = 0`` this returns the x0 estimate. ``noise`` supplies z and is
    only read when ``sigma > 0``.
    """
    t, p = _check_pair(t, p, schedule)
    x = as_array(x_t)
    eps = as_array(noise_hat)
    if eps.shape != x.shape:
        raise ValueError(f"noise estimate shape {eps.shape} != {x.shape}")
    rest = schedule.noise_var[p] - sigma**2
    if rest < -1e-15 * max(schedule.noise_var[p], 1.0):
        raise ValueError(f"sigma^2={sigma**2:.6g} exceeds the marginal variance {schedule.noise_var[p]:.6g} at p={p}")
    ratio = schedule.signal_ratio(p, t)
    out = ratio * (x - math.sqrt(schedule.noise_var[t]) * eps) + math.sqrt(max(rest, 0.0)) * eps
    if sigma > 0.0:
        if noise is None:
            raise ValueError("sigma > 0 needs a noise draw")
        z = noise.sample() if isinstance(noise, NoiseDraw) else as_array(noise)
        out = out + sigma * z
    return ImageTensor(out) if isinstance(x_t, ImageTensor) else out


# ---------------------------------------------------------------- pyramid


@dataclass(frozen=True)
class PyramidPlan:
    """Reverse-time schedule of ``(timestep, downscale factor)`` pairs.

    After the last pair the sampler jumps to t=0 at ``final_factor``.
    """

    steps: tuple
    base_shape: tuple | None = None
    final_factor: int = 1

    def __post_init__(self):
        steps = tuple((int(t), int(f)) for t, f in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps:
            raise ValueError("a plan needs at least one step")
        ts = [t for t, _ in steps]
        if any(b >= a for a, b in zip(ts, ts[1:])) or ts[-1] < 1:
            raise ValueError(f"timesteps must be strictly decreasing and positive, got {ts}")
        for _, f in steps:
            if f not in ALLOWED_FACTORS:
                raise ValueError(f"factor {f} not in {ALLOWED_FACTORS}")
        if self.base_shape is not None:
            h, w = self.base_shape[:2]
            fmax = max(f for _, f in steps)
            if h % fmax or w % fmax:
                raise ValueError(f"base shape {h}x{w} not divisible by factor {fmax}; pad first")

    @property
    def coarse_to_fine(self) -> bool:
        fs = [f for _, f in self.steps] + [self.final_factor]
        return all(b <= a for a, b in zip(fs, fs[1:]))

    def transitions(self):
        """Yield ``(t, factor, p, next_factor)`` in execution order."""
        for i, (t, f) in enumerate(self.steps):
            if i + 1 < len(self.steps):
                p, f_next = self.steps[i + 1]
            else:
                p, f_next = 0, self.final_factor
            yield t, f, p, f_next


def make_pyramid_plan(
    schedule: NoiseSchedule,
    total_steps_out: int = 10,
    factors: Sequence[int] = DEFAULT_FACTORS,
    base_shape=None,
    coarse_to_fine: bool = True,
) -> PyramidPlan:
    """Uniformly strided plan ``t_i = T i / n`` for ``i = n..1``.

    ``factors`` is indexed in output-time order, so the default list
    ``[1,1,1,2,2,2,4,4,4,4]`` executes coarse to fine (4 first). Pass
    ``coarse_to_fine=False`` to execute the list as written.
    """
    T = schedule.T
    n = int(total_steps_out)
    factors = [int(f) for f in factors]
    if n < 1 or n > T:
        raise ValueError(f"total_steps_out must lie in [1, {T}], got {n}")
    if len(factors) != n:
        raise ValueError(f"need {n} factors, got {len(factors)}")
    bad = [f for f in factors if f not in ALLOWED_FACTORS]
    if bad:
        raise ValueError(f"factors {bad} not in {ALLOWED_FACTORS}")
    timesteps = [round(T * i / n) for i in range(n, 0, -1)]
    order = factors[::-1] if coarse_to_fine else factors
    return PyramidPlan(steps=tuple(zip(timesteps, order)), base_shape=base_shape)


def _rescale(x0_hat: np.ndarray, from_factor: int, to_factor: int) -> np.ndarray:
    if from_factor == to_factor:
        return x0_hat
    h, w, _ = x0_hat.shape
    if from_factor > to_factor:
        r = from_factor // to_factor
        return resize(x0_hat, h * r, w * r, mode="bilinear").data
    return box_downscale(x0_hat, to_factor // from_factor).data


def cross_scale_lift(x, x0_hat, from_factor: int, to_factor: int, target_t: int, schedule: NoiseSchedule, noise):
    """Move a clean estimate to another grid and re-noise it to ``target_t``.

    Finer targets are reached by bilinear upsampling, coarser ones (only used
    by fine-to-coarse plans) by box averaging.
    """
    x0 = as_array(x0_hat)
    if x is not None and as_array(x).shape != x0.shape:
        raise ValueError(f"state shape {as_array(x).shape} != estimate shape {x0.shape}")
    if from_factor % to_factor and to_factor % from_factor:
        raise ValueError(f"factors {from_factor} and {to_factor} are not nested")
    lifted = _rescale(x0, from_factor, to_factor)
    if isinstance(noise, NoiseDraw) and tuple(noise.shape) != lifted.shape:
        noise = NoiseDraw(noise.seed, noise.stream_id, lifted.shape)
    return forward_marginal(lifted, target_t, schedule, noise)


def pyramid_sample(
    plan: PyramidPlan,
    denoiser: Denoiser,
    condition: ConditionStack | None,
    schedule: NoiseSchedule,
    seed: int,
    channels: int | None = None,
    base_shape=None,
    unit_init: bool = False,
    return_trace: bool = False,
):
    """Run the plan from noise to a clamped image at full resolution.

    Initial noise has std ``sqrt(V_T)`` so it matches the forward endpoint;
    ``unit_init=True`` draws unit-variance noise instead. Same-scale steps
    use :func:`ddim_step`; scale changes go through x0 recovery and
    :func:`cross_scale_lift`.
    """
    shape_hw = base_shape or plan.base_shape or (condition.hw if condition is not None else None)
    if shape_hw is None:
        raise ValueError("base shape unknown: pass base_shape or a condition stack")
    H, W = shape_hw[:2]
    if condition is not None and condition.hw != (H, W):
        raise ValueError(f"condition is {condition.hw}, plan expects {(H, W)}")
    if channels is None:
        channels = condition.low.channels if condition is not None else 3
    fmax = max(f for _, f in plan.steps)
    if H % fmax or W % fmax:
        raise ValueError(f"base shape {H}x{W} not divisible by factor {fmax}; pad first")

    t0, f0 = plan.steps[0]
    shape = (H // f0, W // f0, channels)
    std = 1.0 if unit_init else math.sqrt(schedule.noise_var[t0])
    x = std * NoiseDraw(seed, stream_id(t0, "init"), shape).sample()
    trace = []

    for t, f, p, f_next in plan.transitions():
        cond = condition.downscale(f) if condition is not None else None
        eps = np.asarray(denoiser.predict(x, t, cond), dtype=np.float64)
        if eps.shape != x.shape:
            raise ValueError(f"denoiser returned {eps.shape} for input {x.shape}")
        if f_next == f:
            x = ddim_step(x, t, p, schedule, eps)
        else:
            x0_hat = recover_x0(x, t, schedule, eps)
            next_shape = (H // f_next, W // f_next, channels)
            draw = NoiseDraw(seed, stream_id(p, "lift"), next_shape)
            x = cross_scale_lift(x, x0_hat, f, f_next, p, schedule, draw)
        trace.append((t, f, p, f_next))

    out = clamp(x)
    return (out, trace) if return_trace else out


def flat_sample(schedule: NoiseSchedule, denoiser: Denoiser, condition, seed: int, steps: int = 10, **kw):
    """Plain strided DDIM at full resolution."""
    plan = make_pyramid_plan(schedule, steps, [1] * steps)
    return pyramid_sample(plan, denoiser, condition, schedule, seed, **kw)


def scale_for_timestep(t: int, T: int = 1000) -> int:
    """Training-time grid for timestep t: factor 4 above 0.6T, 2 above 0.3T, else 1.

    The bands mirror the 4/3/3 split of the default sampling plan.
    """
    if not 0 <= t <= T:
        raise ValueError(f"timestep {t} outside [0, {T}]")
    if t > 0.6 * T:
        return 4
    if t > 0.3 * T:
        return 2
    return 1
