"""Image files, quality metrics, LR synthesis and correlation-map rendering."""

from __future__ import annotations

import io
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import correlate1d

from .diffops import bicubic_resize
from .fileio import atomic_write_bytes
from .tensor import FormatError, ParameterError, ShapeError, check4

_FORMATS = {".png": "PNG", ".ppm": "PPM", ".pgm": "PPM", ".pnm": "PPM"}


def load_image(path) -> np.ndarray:
    """Read an 8-bit gray or RGB PNG/PPM/PGM as a (1, C, H, W) float64 tensor in [0, 1]."""
    raw = Path(path).read_bytes()
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: unreadable image (header {raw[:16]!r})") from exc
    if img.format not in ("PNG", "PPM") or img.mode not in ("L", "RGB"):
        raise FormatError(f"{path}: unsupported {img.format} mode {img.mode} (header {raw[:16]!r})")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr[None].copy()


def to_uint8(t: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and round half up to 8-bit; returns (H, W, C)."""
    check4(t)
    v = np.floor(np.clip(t[0], 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return v.transpose(1, 2, 0)


def save_image(t: np.ndarray, path) -> None:
    """Write the first batch element of ``t`` (1 or 3 channels); the file appears atomically."""
    path = Path(path)
    fmt = _FORMATS.get(path.suffix.lower())
    if fmt is None:
        raise FormatError(f"unsupported image suffix {path.suffix!r}")
    px = to_uint8(t)
    if px.shape[2] == 1:
        img = Image.fromarray(px[:, :, 0], mode="L")
    elif px.shape[2] == 3:
        img = Image.fromarray(px, mode="RGB")
    else:
        raise ShapeError(f"cannot save {px.shape[2]}-channel image")
    buf = io.BytesIO()
    img.save(buf, format=fmt)
    atomic_write_bytes(path, buf.getvalue())


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """PSNR in dB over all elements jointly; identical inputs give ``inf``."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x * x / (2 * sigma * sigma))
    return g / g.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), valid region only.

    Computed per channel and averaged over channels and batch.
    """
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    check4(a)
    win = _gaussian_window()
    half = len(win) // 2
    if min(a.shape[2:]) < len(win):
        raise ParameterError(f"image {a.shape[2:]} smaller than the {len(win)}x{len(win)} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    x = np.asarray(a, np.float64)
    y = np.asarray(b, np.float64)

    def blur(z):
        z = correlate1d(z, win, axis=2, mode="constant")
        z = correlate1d(z, win, axis=3, mode="constant")
        return z[:, :, half:-half, half:-half]

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def make_lr(hr: np.ndarray, s: int) -> np.ndarray:
    """Bicubic downsampling by the integer factor ``s``."""
    check4(hr)
    if hr.shape[2] % s or hr.shape[3] % s:
        raise ShapeError(f"HR size {hr.shape[2:]} not divisible by {s}")
    return bicubic_resize(hr, Fraction(1, s))[0]


# diverging map endpoints (blue, white, red), 0-255
_BLUE = np.array([59.0, 76.0, 192.0])
_WHITE = np.array([242.0, 242.0, 242.0])
_RED = np.array([180.0, 4.0, 38.0])


def corrmap_render(m: np.ndarray) -> np.ndarray:
    """Map the channel-mean of a correlation map to an (H, W, 3) uint8 image.

    Values are min-max normalised, then coloured blue -> white -> red with
    white at the median.  A map whose spread is at rounding level (such as
    that of a constant image) renders as uniform white.
    """
    check4(m)
    v = m[0].mean(axis=0)
    lo, hi = v.min(), v.max()
    flat = hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi))
    v = np.full_like(v, 0.5) if flat else (v - lo) / (hi - lo)
    med = float(np.median(v))
    below = v <= med
    t_lo = np.where(below, v / med if med > 0 else 1.0, 0.0)
    t_hi = np.where(below, 0.0, (v - med) / (1.0 - med) if med < 1 else 0.0)
    rgb = np.where(below[..., None],
                   _BLUE + (_WHITE - _BLUE) * t_lo[..., None],
                   _WHITE + (_RED - _WHITE) * t_hi[..., None])
    return np.floor(rgb + 0.5).astype(np.uint8)


def corrmap_visualize(m: np.ndarray, path) -> np.ndarray:
    """Render a correlation map to a PNG at ``path``; returns the pixels."""
    rgb = corrmap_render(m)
    buf = io.BytesIO()
    Image.fromarray(rgb, mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())
    return rgb
