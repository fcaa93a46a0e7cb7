"""Image quality metrics and the training losses.

Losses follow the composite objective: a brightness-aligned L1 on the x0
estimate, an L1 feature loss through a pluggable extractor, and a plain L1
on the predicted noise, summed without further weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .image import as_array, box_downscale, histogram

__all__ = [
    "PSNR_CAP_DB",
    "LossConfig",
    "LossReport",
    "DegenerateInputError",
    "FeatureExtractor",
    "PoolingExtractor",
    "psnr",
    "ssim",
    "gaussian_window",
    "l1",
    "bhattacharyya_coefficient",
    "gtmean_loss",
    "perception_loss",
    "total_loss",
]

PSNR_CAP_DB = 99.0


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    w_original: float = 1.0
    lambda_p: float = 0.01
    layer_weights: dict = field(default_factory=lambda: {"conv3_4": 1.0, "conv4_4": 1.0})
    hist_bins: int = 64

    def __post_init__(self):
        if self.w_original < 0 or self.lambda_p < 0 or any(v < 0 for v in self.layer_weights.values()):
            raise ValueError("loss weights must be non-negative")
        if self.hist_bins < 2:
            raise ValueError(f"hist_bins must be >= 2, got {self.hist_bins}")


@dataclass(frozen=True)
class LossReport:
    l_gt: float
    l_p: float
    l1_noise: float
    total: float
    w_bhatt: float
    lambda_gt: float


class FeatureExtractor(Protocol):
    def features(self, img: np.ndarray, layer_name: str) -> np.ndarray: ...


class PoolingExtractor:
    """Stand-in for VGG-19 features: block-average pooling per layer.

    Pooling preserves a constant offset exactly, which makes the feature loss
    analytically checkable. Image sides must divide the pooling factor.
    """

    def __init__(self, pools: dict | None = None):
        self.pools = pools or {"conv3_4": 4, "conv4_4": 8}

    def features(self, img, layer_name):
        if layer_name not in self.pools:
            raise KeyError(f"unknown layer {layer_name!r}")
        return box_downscale(img, self.pools[layer_name]).data


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = as_array(a), as_array(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def l1(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


# ---------------------------------------------------------------- metrics


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give ``inf``."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # separable 'valid' correlation of an H x W plane with an outer-product window
    g = win.sum(axis=1)
    n = len(g)
    rows = sum(g[i] * img[i : img.shape[0] - n + 1 + i] for i in range(n))
    return sum(g[j] * rows[:, j : img.shape[1] - n + 1 + j] for j in range(n))


def ssim(a, b, window: int = 11, k1: float = 0.01, k2: float = 0.03, peak: float = 1.0, sigma: float = 1.5) -> float:
    """Gaussian-windowed SSIM over valid window positions, averaged over channels."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}x{window} window")
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[:, :, c], b[:, :, c]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(float(np.mean(num / den)))
    return float(np.mean(vals))


# ---------------------------------------------------------------- losses


def bhattacharyya_coefficient(p: np.ndarray, q: np.ndarray) -> float:
    """``sum sqrt(p_i q_i)``, clipped into [0, 1] against rounding."""
    return float(min(1.0, max(0.0, np.sum(np.sqrt(p * q)))))


def gtmean_loss(fx, y, cfg: LossConfig | None = None) -> tuple[float, float, float]:
    """Brightness-aligned L1: ``W L1(fx, y) + (1 - W) L1(lambda fx, y)``.

    ``lambda = mean(y) / mean(fx)``; ``W`` is the Bhattacharyya coefficient
    of the BT.601 luminance histograms. Returns ``(value, lambda, W)``.
    The original-loss weight from ``cfg`` scales the first term.
    """
    cfg = cfg or LossConfig()
    fx, y = _pair(fx, y)
    mean_fx = float(fx.mean())
    if mean_fx <= 0.0:
        raise DegenerateInputError(
            "mean(f(x)) is zero, so the brightness scale mean(y)/mean(f(x)) is undefined; "
            "clamp the prediction away from zero or drop the aligned term"
        )
    lam = float(y.mean()) / mean_fx
    w = bhattacharyya_coefficient(histogram(fx, None, cfg.hist_bins), histogram(y, None, cfg.hist_bins))
    value = w * cfg.w_original * l1(fx, y) + (1.0 - w) * l1(lam * fx, y)
    return value, lam, w


def perception_loss(fx, y, extractor: FeatureExtractor, cfg: LossConfig | None = None) -> float:
    cfg = cfg or LossConfig()
    fx, y = _pair(fx, y)
    if cfg.lambda_p == 0.0:
        return 0.0
    total = 0.0
    for layer, weight in cfg.layer_weights.items():
        total += weight * l1(extractor.features(fx, layer), extractor.features(y, layer))
    return cfg.lambda_p * total


def total_loss(x0_hat, x0, eps_hat, eps, extractor: FeatureExtractor, cfg: LossConfig | None = None) -> LossReport:
    cfg = cfg or LossConfig()
    l_gt, lam, w = gtmean_loss(x0_hat, x0, cfg)
    l_p = perception_loss(x0_hat, x0, extractor, cfg)
    l_eps = l1(eps_hat, eps)
    return LossReport(l_gt=l_gt, l_p=l_p, l1_noise=l_eps, total=l_gt + l_p + l_eps, w_bhatt=w, lambda_gt=lam)
