"""Condition preprocessing for the low-light input.

The dehaze prior treats the inverted low-light image as haze and undoes a
single-parameter scattering model (A = 1). Inversion, dehazing and
re-inversion collapse to one division:

    X_E = X_L / (t0 + w * (1 - w * min_c(1 - X_L)))

with ``t0 = mean(X_L)`` over all pixels and channels and ``w = 1 - t0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .image import ImageTensor, as_array, rgb_to_ycbcr, ycbcr_to_rgb
from .sampler import ConditionStack

__all__ = [
    "DehazeParams",
    "DEFAULT_GAMMA",
    "dehaze_params",
    "transmission",
    "dehaze_prior",
    "dehaze_explicit",
    "hist_equalize",
    "position_channels",
    "assemble_condition",
]

DEFAULT_GAMMA = 1 / 2.2


@dataclass(frozen=True)
class DehazeParams:
    t0: float
    omega: float
    atmospheric_light: float = 1.0


def _rgb(x) -> np.ndarray:
    arr = as_array(x)
    if arr.shape[2] != 3:
        raise ValueError(f"dehaze prior needs a 3-channel image, got {arr.shape[2]}")
    return arr


def dehaze_params(x_low) -> DehazeParams:
    t0 = float(_rgb(x_low).mean())
    return DehazeParams(t0=t0, omega=1.0 - t0)


def transmission(x_low, params: DehazeParams | None = None) -> np.ndarray:
    """Per-pixel ``T_r`` (H x W x 1) from the channel minimum of the inverted image."""
    arr = _rgb(x_low)
    params = params or dehaze_params(arr)
    dark = (1.0 - arr).min(axis=2, keepdims=True)
    return params.t0 + params.omega * (1.0 - params.omega * dark)


def dehaze_explicit(x_low, clip: bool = False) -> ImageTensor:
    """Invert, dehaze with A = 1, invert again; the long way round."""
    arr = _rgb(x_low)
    params = dehaze_params(arr)
    a = params.atmospheric_light
    hazy = 1.0 - arr
    dehazed = (hazy - a) / transmission(arr, params) + a
    out = 1.0 - dehazed
    return ImageTensor(np.clip(out, 0.0, 1.0) if clip else out)


def dehaze_prior(x_low, train_mode: bool = False, gamma: float = DEFAULT_GAMMA, clip: bool = True) -> ImageTensor:
    """Brightened prior image for the condition stack.

    ``train_mode`` adds the luminance gamma correction ``Y <- Y**gamma`` in
    YCbCr. An all-white input has ``w = 0`` and passes through unchanged.
    """
    arr = _rgb(x_low)
    tr = np.broadcast_to(transmission(arr), arr.shape)
    # T_r >= 1 - w^2 > 0 except for an all-black frame, which stays black
    out = np.divide(arr, tr, out=np.zeros_like(arr), where=tr > 0)
    if clip:
        out = np.clip(out, 0.0, 1.0)
    if train_mode:
        ycc = rgb_to_ycbcr(out).data
        ycc[:, :, 0] = np.clip(ycc[:, :, 0], 0.0, 1.0) ** gamma
        out = np.clip(ycbcr_to_rgb(ycc).data, 0.0, 1.0)
    return ImageTensor(out, clamped=clip)


def hist_equalize(x, bins: int = 256) -> ImageTensor:
    """Per-channel CDF equalisation; a level maps to the cumulative mass of its bin."""
    arr = as_array(x)
    if arr.shape[2] not in (1, 3):
        raise ValueError(f"expected 1 or 3 channels, got {arr.shape[2]}")
    out = np.empty_like(arr)
    for c in range(arr.shape[2]):
        idx = np.clip(np.floor(arr[:, :, c] * bins), 0, bins - 1).astype(int)
        counts = np.bincount(idx.ravel(), minlength=bins)
        cdf = np.cumsum(counts) / idx.size
        out[:, :, c] = cdf[idx]
    return ImageTensor(out)


def position_channels(h: int, w: int, n_channels: int = 4) -> ImageTensor:
    """Deterministic coordinate channels for an ``h x w`` grid.

    2 channels: normalised (row, col) in [0, 1]. 4: plus (1 - row, 1 - col).
    10: plus ``sin(2 pi f row), cos(2 pi f col)`` for f in 1, 2, 4.
    """
    if n_channels not in (2, 4, 10):
        raise ValueError(f"n_channels must be 2, 4 or 10, got {n_channels}")
    row = np.arange(h) / (h - 1) if h > 1 else np.zeros(1)
    col = np.arange(w) / (w - 1) if w > 1 else np.zeros(1)
    rr, cc = np.meshgrid(row, col, indexing="ij")
    chans = [rr, cc]
    if n_channels >= 4:
        chans += [1.0 - rr, 1.0 - cc]
    if n_channels == 10:
        for f in (1, 2, 4):
            chans += [np.sin(2 * np.pi * f * rr), np.cos(2 * np.pi * f * cc)]
    return ImageTensor(np.stack(chans, axis=2))


def assemble_condition(
    x_low,
    prior: str = "dehaze",
    train_mode: bool = False,
    gamma: float = DEFAULT_GAMMA,
    pos_channels: int = 4,
) -> ConditionStack:
    """Build the condition stack ``low, pos, prior``.

    ``prior`` is ``"dehaze"`` (default), ``"hiseq"`` (histogram-equalised
    substitute) or ``"none"`` (prior channels omitted).
    """
    low = ImageTensor(_rgb(x_low))
    if prior == "dehaze":
        extra = dehaze_prior(low, train_mode=train_mode, gamma=gamma)
    elif prior == "hiseq":
        extra = hist_equalize(low)
    elif prior == "none":
        extra = None
    else:
        raise ValueError(f"unknown prior {prior!r}")
    pos = position_channels(low.height, low.width, pos_channels)
    return ConditionStack(low=low, pos=pos, dehaze=extra)
