"""Structural differentiable operators on NCHW arrays.

Every op returns ``(out, vjp)``; ``vjp(g)`` returns cotangents for the
differentiable inputs in argument order.  Sampling ops use zero padding
outside the image.
"""

from __future__ import annotations

from fractions import Fraction
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ParameterError, ShapeError, check4, differentiable


# --- initialisation ---------------------------------------------------------

def uniform_init(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    """Fan-in scaled uniform draw in +-sqrt(1 / (C_in * K * K))."""
    c_out, c_in, kh, kw = shape
    bound = np.sqrt(1.0 / (c_in * kh * kw))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def icnr_init(shape, r: int, base_init: Callable[[tuple], np.ndarray]) -> np.ndarray:
    """Weights whose conv -> pixel_shuffle(r) starts as nearest-neighbour upsampling.

    ``base_init`` draws a sub-kernel of shape ``(C_out / r**2, C_in, K, K)``;
    each sub-filter is repeated ``r**2`` times so that every group of output
    channels feeding one shuffled pixel block is identical.
    """
    c_out = shape[0]
    if r < 1 or c_out % (r * r):
        raise ShapeError(f"C_out={c_out} not divisible by r^2={r * r}")
    sub = base_init((c_out // (r * r),) + tuple(shape[1:]))
    return np.repeat(sub, r * r, axis=0)


# --- convolution ------------------------------------------------------------

def _conv_out(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


@differentiable("conv2d")
def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
           stride: int = 1, padding: int | None = None):
    """Zero-padded cross-correlation; ``padding`` defaults to (K-1)/2."""
    check4(x, "x")
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = weight.shape
    if c_in != c:
        raise ShapeError(f"conv2d expects {c_in} input channels, got {c}")
    if k != k2:
        raise ShapeError("square kernels only")
    pad = (k - 1) // 2 if padding is None else padding
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    wmat = weight.reshape(c_out, -1)

    if k == 1 and pad == 0 and stride == 1:
        cols = x.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        # im2col through an NHWC scratch copy: the final reshape is then a single pass
        xp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        xp[:, pad:pad + h, pad:pad + w] = x.transpose(0, 2, 3, 1)
        win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
        cols = win.reshape(n * ho * wo, c * k * k)
    y = cols @ wmat.T + bias.reshape(1, c_out)
    y = y.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (g2.T @ cols).reshape(weight.shape)
        db = g2.sum(axis=0).reshape(bias.shape)
        dcols = g2 @ wmat
        if k == 1 and pad == 0 and stride == 1:
            dx = dcols.reshape(n, h, w, c).transpose(0, 3, 1, 2)
            return dx, dw, db
        dcols = dcols.reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
        dx = dxp[:, pad:pad + h, pad:pad + w].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw, db

    return np.ascontiguousarray(y), vjp


@differentiable("residual_block")
def residual_block(x, w1, b1, w2, b2):
    """``x + conv2(relu(conv1(x)))`` with 3x3 'same' convolutions."""
    h1, vjp1 = conv2d(x, w1, b1)
    mask = h1 > 0
    h2, vjp2 = conv2d(h1 * mask, w2, b2)
    if h2.shape != x.shape:
        raise ShapeError(f"residual branch {h2.shape} does not match skip {x.shape}")

    def vjp(g):
        da, dw2, db2 = vjp2(g)
        dx, dw1, db1 = vjp1(da * mask)
        return g + dx, dw1, db1, dw2, db2

    return x + h2, vjp


# --- rearrangements ---------------------------------------------------------

def _s2d(x, r):
    n, c, h, w = x.shape
    t = x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(t).reshape(n, c * r * r, h // r, w // r)


def _d2s(x, r):
    n, c, h, w = x.shape
    t = x.reshape(n, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(t).reshape(n, c // (r * r), h * r, w * r)


@differentiable("space_to_depth")
def space_to_depth(x: np.ndarray, r: int):
    """(N,C,H,W) -> (N,C*r*r,H/r,W/r); block offset (dy,dx) lands in channel c*r*r + dy*r + dx."""
    check4(x)
    if r < 1 or x.shape[2] % r or x.shape[3] % r:
        raise ShapeError(f"spatial size {x.shape[2:]} not divisible by {r}")
    return _s2d(x, r), lambda g: (_d2s(g, r),)


@differentiable("pixel_shuffle")
def pixel_shuffle(x: np.ndarray, r: int):
    """Inverse of :func:`space_to_depth` with the same channel ordering."""
    check4(x)
    if r < 1 or x.shape[1] % (r * r):
        raise ShapeError(f"{x.shape[1]} channels not divisible by r^2={r * r}")
    return _d2s(x, r), lambda g: (_s2d(g, r),)


def depth_to_space(x: np.ndarray, r: int) -> np.ndarray:
    return pixel_shuffle(x, r)[0]


def nearest_upsample(x: np.ndarray, r: int) -> np.ndarray:
    return x.repeat(r, axis=2).repeat(r, axis=3)


# --- bilinear sampling ------------------------------------------------------

class _Bilinear:
    """Bilinear interpolation of an (N,C,H,W) image at float positions ``py, px`` (N,P).

    The interpolation is held as a sparse (N*P, N*H*W) matrix acting on the
    image in channels-last row layout, together with its derivatives in y and
    x.  Corners outside the image contribute zero.
    """

    def __init__(self, shape, py, px):
        n, c, h, w = shape
        self.shape = shape
        p = py.shape[1]
        y0 = np.floor(py)
        x0 = np.floor(px)
        wy = py - y0
        wx = px - x0
        y0 = y0.astype(np.int64)
        x0 = x0.astype(np.int64)
        row_ids = np.arange(n * p).reshape(n, p)
        plane = (np.arange(n) * (h * w))[:, None]
        rows, cols, val, dval_y, dval_x = [], [], [], [], []
        for dy in (0, 1):
            fy = wy if dy else 1 - wy
            sy = 1 if dy else -1
            for dx in (0, 1):
                fx = wx if dx else 1 - wx
                sx = 1 if dx else -1
                yy, xx = y0 + dy, x0 + dx
                m = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
                rows.append(row_ids[m])
                cols.append((plane + yy * w + xx)[m])
                val.append((fy * fx)[m])
                dval_y.append((sy * fx)[m])
                dval_x.append((fy * sx)[m])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        dims = (n * p, n * h * w)

        def mat(v):
            return sp.csr_matrix((np.concatenate(v).astype(py.dtype), (rows, cols)), shape=dims)

        self.p = p
        self.m = mat(val)
        self.my = mat(dval_y)
        self.mx = mat(dval_x)

    @staticmethod
    def rows(x):
        """(N,C,H,W) -> (N*H*W, C)."""
        n, c = x.shape[:2]
        return x.transpose(0, 2, 3, 1).reshape(-1, c)

    def sample(self, x):
        """Interpolated values, (N*P, C)."""
        self.xr = self.rows(x)
        return self.m @ self.xr

    def grad_x(self, g):
        """Cotangent (N*P, C) scattered back to an (N,C,H,W) image."""
        n, c, h, w = self.shape
        return np.ascontiguousarray((self.m.T @ g).reshape(n, h, w, c).transpose(0, 3, 1, 2))

    def grad_pos(self, g):
        """Cotangents of the sampling positions, each (N, P)."""
        n = self.shape[0]
        gy = ((self.my @ self.xr) * g).sum(axis=1).reshape(n, self.p)
        gx = ((self.mx @ self.xr) * g).sum(axis=1).reshape(n, self.p)
        return gy, gx


def _grid(h, w, dtype):
    return np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")


@differentiable("bilinear_warp")
def bilinear_warp(x: np.ndarray, flow: np.ndarray):
    """``out(p) = x(p + flow(p))``; flow channel 0 is dy, channel 1 is dx."""
    check4(x, "x")
    n, c, h, w = x.shape
    if flow.shape != (n, 2, h, w):
        raise ShapeError(f"flow shape {flow.shape} does not match {(n, 2, h, w)}")
    yy, xx = _grid(h, w, flow.dtype)
    py = (yy + flow[:, 0]).reshape(n, -1)
    px = (xx + flow[:, 1]).reshape(n, -1)
    bl = _Bilinear(x.shape, py, px)
    out = bl.sample(x).reshape(n, h, w, c).transpose(0, 3, 1, 2)

    def vjp(g):
        gr = _Bilinear.rows(g)
        gy, gx = bl.grad_pos(gr)
        dflow = np.stack([gy.reshape(n, h, w), gx.reshape(n, h, w)], axis=1)
        return bl.grad_x(gr), dflow

    return np.ascontiguousarray(out), vjp


@differentiable("deformable_conv")
def deformable_conv(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, offsets: np.ndarray):
    """Deformable convolution (single offset group, no modulation), stride 1, 'same' size.

    ``offsets`` is (N, 2*K*K, H, W) holding (dy, dx) per tap, taps row-major
    over the kernel.  Tap (a, b) of output pixel (y, x) samples ``x`` at
    ``(y + a - pad + dy, x + b - pad + dx)``.
    """
    check4(x, "x")
    n, c, h, w = x.shape
    c_out, c_in, k, _ = weight.shape
    if c_in != c:
        raise ShapeError(f"deformable_conv expects {c_in} input channels, got {c}")
    kk = k * k
    if offsets.shape != (n, 2 * kk, h, w):
        raise ShapeError(f"offsets shape {offsets.shape}, expected {(n, 2 * kk, h, w)}")
    pad = (k - 1) // 2
    yy, xx = _grid(h, w, offsets.dtype)
    ti, tj = np.divmod(np.arange(kk), k)
    # sample positions laid out (N, H, W, tap)
    py = yy[:, :, None] + (ti - pad).astype(offsets.dtype) + offsets[:, 0::2].transpose(0, 2, 3, 1)
    px = xx[:, :, None] + (tj - pad).astype(offsets.dtype) + offsets[:, 1::2].transpose(0, 2, 3, 1)
    bl = _Bilinear(x.shape, py.reshape(n, -1), px.reshape(n, -1))
    cols = bl.sample(x).reshape(n * h * w, kk * c)  # (tap, channel) per row
    wmat = weight.reshape(c_out, c, kk).transpose(0, 2, 1).reshape(c_out, kk * c)
    y = (cols @ wmat.T + bias.reshape(1, c_out)).reshape(n, h, w, c_out).transpose(0, 3, 1, 2)

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (g2.T @ cols).reshape(c_out, kk, c).transpose(0, 2, 1).reshape(weight.shape)
        db = g2.sum(axis=0).reshape(bias.shape)
        dcols = (g2 @ wmat).reshape(-1, c)
        gy, gx = bl.grad_pos(dcols)
        doff = np.empty_like(offsets)
        doff[:, 0::2] = gy.reshape(n, h, w, kk).transpose(0, 3, 1, 2)
        doff[:, 1::2] = gx.reshape(n, h, w, kk).transpose(0, 3, 1, 2)
        return bl.grad_x(dcols), np.ascontiguousarray(dw), db, doff

    return np.ascontiguousarray(y), vjp


def broadcast_flow(flow: np.ndarray, k: int = 3) -> np.ndarray:
    """Replicate a (N,2,H,W) flow over all K*K taps as deformable offsets."""
    return np.tile(flow, (1, k * k, 1, 1))


# --- bicubic resampling -----------------------------------------------------

def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def _as_scale(scale) -> Fraction:
    s = Fraction(scale).limit_denominator(10 ** 6) if not isinstance(scale, Fraction) else scale
    if s <= 0:
        raise ParameterError(f"scale must be positive, got {scale}")
    return s


@lru_cache(maxsize=64)
def bicubic_matrix(n_in: int, scale: Fraction) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix for one axis.

    Half-pixel centres, clamped edges; when shrinking, the kernel is widened
    by 1/scale (antialiasing).  Rows are normalised to sum to one.
    """
    n_out = int(n_in * scale)
    s = float(scale)
    kscale = min(1.0, s)
    support = 2.0 / kscale
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) / s - 0.5
        lo = int(np.floor(centre - support)) + 1
        hi = int(np.ceil(centre + support))
        taps = np.arange(lo, hi)
        wts = cubic_kernel((centre - taps) * kscale)
        wts = wts / wts.sum()
        np.add.at(m[i], np.clip(taps, 0, n_in - 1), wts)
    m.setflags(write=False)
    return m


@differentiable("bicubic_resize")
def bicubic_resize(x: np.ndarray, scale):
    """Separable Catmull-Rom (a=-0.5) resize to (floor(s*H), floor(s*W))."""
    check4(x)
    s = _as_scale(scale)
    if s < 1 and (1 / s).denominator != 1:
        raise ParameterError(f"downscale factor 1/{float(s)} must be an integer")
    if s == 1:
        return x.copy(), lambda g: (g,)
    ah = bicubic_matrix(x.shape[2], s).astype(x.dtype)
    aw = bicubic_matrix(x.shape[3], s).astype(x.dtype)
    y = ah @ x @ aw.T
    return y, lambda g: (ah.T @ g @ aw,)
