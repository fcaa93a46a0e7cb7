"""H x W x C float images in [0, 1]: PNG I/O, resampling, colour, histograms, crop/pad.

Pixel data lives in ``[0, 1]``; noised tensors may leave that range and are
never clamped implicitly. Only :func:`clamp` and the final output of a sampler
do that.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np
import png

__all__ = [
    "ImageTensor",
    "PNGDecodeError",
    "as_array",
    "clamp",
    "png_read",
    "png_write",
    "read_png_file",
    "write_png_file",
    "resize",
    "box_downscale",
    "rgb_to_ycbcr",
    "ycbcr_to_rgb",
    "luminance",
    "histogram",
    "crop",
    "pad_to_multiple",
    "unpad",
]

# BT.601 full-range (JPEG/JFIF): Cb = (B - Y) / 1.772, Cr = (R - Y) / 1.402,
# chroma offset by 0.5
_KR, _KG, _KB = 0.299, 0.587, 0.114
_RGB_TO_YCBCR = np.array(
    [
        [_KR, _KG, _KB],
        [-_KR / (2 * (1 - _KB)), -_KG / (2 * (1 - _KB)), 0.5],
        [0.5, -_KG / (2 * (1 - _KR)), -_KB / (2 * (1 - _KR))],
    ]
)
_YCBCR_TO_RGB = np.linalg.inv(_RGB_TO_YCBCR)
_CHROMA_OFFSET = np.array([0.0, 0.5, 0.5])


class PNGDecodeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """A height x width x channels float64 image.

    ``clamped`` records whether a clamp to [0, 1] has been applied.
    ``orig_hw`` is set by :func:`pad_to_multiple` so :func:`unpad` can undo it.
    """

    data: np.ndarray
    clamped: bool = False
    orig_hw: tuple[int, int] | None = field(default=None)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"expected an H x W x C array, got shape {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def flat(self) -> np.ndarray:
        """Row-major, channel-interleaved samples of length H*W*C."""
        return self.data.reshape(-1)


def as_array(img) -> np.ndarray:
    """Return the float64 H x W x C array behind ``img`` (ImageTensor or array)."""
    if isinstance(img, ImageTensor):
        return img.data
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def clamp(img) -> ImageTensor:
    return ImageTensor(np.clip(as_array(img), 0.0, 1.0), clamped=True)


# ---------------------------------------------------------------- PNG


def png_read(data: bytes) -> ImageTensor:
    """Decode PNG bytes; samples are divided by ``2**bitdepth - 1``.

    Palette images are expanded to RGB(A). Sub-byte greyscale depths are
    scaled by their own maximum.
    """
    try:
        reader = png.Reader(bytes=data)
        width, height, rows, info = reader.asDirect()
        arr = np.vstack([np.asarray(r, dtype=np.float64) for r in rows])
    except (png.Error, ValueError, EOFError) as exc:
        raise PNGDecodeError(f"could not decode PNG: {exc}") from exc
    planes = info["planes"]
    maxval = float(2 ** info["bitdepth"] - 1)
    return ImageTensor(arr.reshape(height, width, planes) / maxval)


def png_write(img, bitdepth: int = 8) -> bytes:
    """Encode ``img`` as PNG; data must already lie in [0, 1].

    Quantisation rounds half away from zero, so 8-bit read/write is lossless.
    """
    arr = as_array(img)
    if bitdepth not in (8, 16):
        raise ValueError(f"bitdepth must be 8 or 16, got {bitdepth}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"image samples outside [0, 1] (min={np.nanmin(arr):.4g}, "
            f"max={np.nanmax(arr):.4g}); clamp before writing"
        )
    h, w, c = arr.shape
    if c not in (1, 2, 3, 4):
        raise ValueError(f"PNG supports 1-4 channels, got {c}")
    maxval = 2**bitdepth - 1
    q = np.floor(arr * maxval + 0.5).astype(np.uint16 if bitdepth == 16 else np.uint8)
    writer = png.Writer(
        width=w,
        height=h,
        greyscale=c <= 2,
        alpha=c in (2, 4),
        bitdepth=bitdepth,
    )
    buf = io.BytesIO()
    writer.write(buf, q.reshape(h, w * c))
    return buf.getvalue()


def read_png_file(path) -> ImageTensor:
    with open(path, "rb") as fh:
        return png_read(fh.read())


def write_png_file(path, img, bitdepth: int = 8) -> None:
    data = png_write(img, bitdepth=bitdepth)
    with open(path, "wb") as fh:
        fh.write(data)


# ---------------------------------------------------------------- resampling


def box_downscale(img, factor: int) -> ImageTensor:
    """Average non-overlapping ``factor x factor`` blocks. Dims must divide."""
    arr = as_array(img)
    h, w, c = arr.shape
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide image of size {h}x{w}")
    if factor == 1:
        return ImageTensor(arr.copy())
    out = arr.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))
    return ImageTensor(out)


def _bilinear_axis(n_in: int, n_out: int):
    # half-pixel centres, clamped to the edge samples
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize(img, new_h: int, new_w: int, mode: str = "bilinear") -> ImageTensor:
    """Resample to ``new_h x new_w``.

    ``nearest`` picks ``floor(i * n_in / n_out)``. ``bilinear`` uses
    half-pixel alignment with edge clamping, except that an exact
    integer-factor reduction falls back to box averaging.
    """
    arr = as_array(img)
    if new_h < 1 or new_w < 1:
        raise ValueError(f"target size must be positive, got {new_h}x{new_w}")
    h, w, _ = arr.shape
    if mode == "nearest":
        rows = np.floor(np.arange(new_h) * h / new_h).astype(int)
        cols = np.floor(np.arange(new_w) * w / new_w).astype(int)
        return ImageTensor(arr[rows][:, cols])
    if mode != "bilinear":
        raise ValueError(f"unknown resize mode {mode!r}")
    if (new_h, new_w) == (h, w):
        return ImageTensor(arr.copy())
    if h % new_h == 0 and w % new_w == 0 and h // new_h == w // new_w:
        return box_downscale(arr, h // new_h)

    lo, hi, fr = _bilinear_axis(h, new_h)
    tmp = arr[lo] * (1.0 - fr)[:, None, None] + arr[hi] * fr[:, None, None]
    lo, hi, fr = _bilinear_axis(w, new_w)
    out = tmp[:, lo] * (1.0 - fr)[None, :, None] + tmp[:, hi] * fr[None, :, None]
    return ImageTensor(out)


# ---------------------------------------------------------------- colour


def _require_rgb(arr: np.ndarray) -> None:
    if arr.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got {arr.shape[2]}")


def rgb_to_ycbcr(img) -> ImageTensor:
    arr = as_array(img)
    _require_rgb(arr)
    return ImageTensor(arr @ _RGB_TO_YCBCR.T + _CHROMA_OFFSET)


def ycbcr_to_rgb(img) -> ImageTensor:
    arr = as_array(img)
    _require_rgb(arr)
    return ImageTensor((arr - _CHROMA_OFFSET) @ _YCBCR_TO_RGB.T)


def luminance(img) -> np.ndarray:
    """BT.601 luma as an H x W array; grey (+alpha) images pass channel 0 through."""
    arr = as_array(img)
    if arr.shape[2] <= 2:
        return arr[:, :, 0]
    return arr[:, :, :3] @ _RGB_TO_YCBCR[0]


def _bin_probabilities(values: np.ndarray, bins: int) -> np.ndarray:
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    idx = np.clip(np.floor(values.reshape(-1) * bins), 0, bins - 1).astype(int)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return counts / counts.sum()


def histogram(img, channel: int | None, bins: int) -> np.ndarray:
    """Normalised histogram over uniform bins on [0, 1].

    ``channel=None`` uses BT.601 luminance. A sample of exactly 1.0 lands in
    the last bin; out-of-range samples are clipped into the end bins.
    """
    arr = as_array(img)
    values = luminance(arr) if channel is None else arr[:, :, channel]
    return _bin_probabilities(values, bins)


# ---------------------------------------------------------------- crop / pad


def crop(img, x: int, y: int, w: int, h: int) -> ImageTensor:
    arr = as_array(img)
    H, W, _ = arr.shape
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise ValueError(f"crop window ({x},{y},{w},{h}) outside {W}x{H} image")
    return ImageTensor(arr[y : y + h, x : x + w].copy())


def pad_to_multiple(img, m: int, mode: str = "reflect") -> ImageTensor:
    """Grow bottom/right edges so both dims are multiples of ``m``.

    Reflection excludes the edge sample itself (``abc|ba``).
    """
    if m < 1:
        raise ValueError(f"multiple must be >= 1, got {m}")
    if mode != "reflect":
        raise ValueError(f"only reflect padding is supported, got {mode!r}")
    arr = as_array(img)
    h, w, _ = arr.shape
    ph, pw = -h % m, -w % m
    if isinstance(img, ImageTensor) and img.orig_hw is not None:
        orig = img.orig_hw
    else:
        orig = (h, w)
    if ph or pw:
        # single-row/column images have nothing to reflect from
        pad_mode = "reflect" if min(h, w) > 1 else "edge"
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode=pad_mode)
    return ImageTensor(arr.copy(), orig_hw=orig)


def unpad(img) -> ImageTensor:
    if not isinstance(img, ImageTensor) or img.orig_hw is None:
        raise ValueError("image carries no padding record")
    h, w = img.orig_hw
    return replace(img, data=img.data[:h, :w].copy(), orig_hw=None)
