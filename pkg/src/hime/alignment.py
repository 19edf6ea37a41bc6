"""Reference feature alignment, content-conditioned aggregation and block-matching flow."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, List, Optional, Sequence

import numpy as np

from .diffops import bilinear_warp, broadcast_flow, conv2d, deformable_conv
from .tensor import ConfigurationError, ParameterError, ShapeError, check4, differentiable, sigmoid

RFA_MODES = ("small", "large", "conv")


# --- block matching flow ----------------------------------------------------

def _mono(x):
    return x.mean(axis=1)


def _halve(img):
    h, w = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    img = img[:h, :w]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _match_level(src, dst, prior, radius, block):
    h, w = dst.shape
    flow = np.zeros((2, h, w), dtype=np.int64)
    deltas = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    for y0 in range(0, h, block):
        for x0 in range(0, w, block):
            bh, bw = min(block, h - y0), min(block, w - x0)
            patch = dst[y0:y0 + bh, x0:x0 + bw]
            py, px = prior[:, y0 + bh // 2, x0 + bw // 2]
            best_key, best = None, (0, 0)
            for dy, dx in deltas:
                vy, vx = py + dy, px + dx
                sy, sx = y0 + vy, x0 + vx
                if sy < 0 or sx < 0 or sy + bh > h or sx + bw > w:
                    continue
                sad = np.abs(src[sy:sy + bh, sx:sx + bw] - patch).sum()
                key = (sad, vy * vy + vx * vx, vy, vx)
                if best_key is None or key < best_key:
                    best_key, best = key, (vy, vx)
            flow[0, y0:y0 + bh, x0:x0 + bw] = best[0]
            flow[1, y0:y0 + bh, x0:x0 + bw] = best[1]
    return flow


def block_match_flow(src: np.ndarray, dst: np.ndarray, search_radius: int = 2,
                     block: int = 4, levels: int = 1) -> np.ndarray:
    """Integer flow such that ``dst(p) ~ src(p + flow(p))``, shape (N, 2, H, W).

    Coarse-to-fine over ``levels`` factor-2 pyramid levels.  Each block takes
    the displacement with the lowest sum of absolute differences within
    +-``search_radius`` of the upsampled coarser estimate; ties go to the
    smaller displacement, then to the lexicographically smaller (dy, dx).
    Candidates whose source block leaves the image are skipped.
    """
    check4(src, "src")
    if src.shape != dst.shape:
        raise ShapeError(f"src {src.shape} and dst {dst.shape} differ")
    if search_radius < 1 or block < 1 or levels < 1:
        raise ParameterError("search_radius, block and levels must all be >= 1")
    n, _, h, w = src.shape
    out = np.zeros((n, 2, h, w))
    for b in range(n):
        pyr_s, pyr_d = [_mono(src[b:b + 1])[0]], [_mono(dst[b:b + 1])[0]]
        for _ in range(levels - 1):
            if min(pyr_s[-1].shape) < 2 * block:
                break
            pyr_s.append(_halve(pyr_s[-1]))
            pyr_d.append(_halve(pyr_d[-1]))
        flow = np.zeros((2,) + pyr_d[-1].shape, dtype=np.int64)
        for lvl in range(len(pyr_d) - 1, -1, -1):
            s, d = pyr_s[lvl], pyr_d[lvl]
            if flow.shape[1:] != d.shape:
                up = 2 * flow.repeat(2, axis=1).repeat(2, axis=2)
                ph, pw = d.shape[0] - up.shape[1], d.shape[1] - up.shape[2]
                flow = np.pad(up, ((0, 0), (0, max(ph, 0)), (0, max(pw, 0))), mode="edge")
                flow = flow[:, :d.shape[0], :d.shape[1]]
            flow = _match_level(s, d, flow, search_radius, block)
        out[b] = flow
    return out


# --- RFA --------------------------------------------------------------------

@dataclass
class RfaParams:
    """Offset predictor (two 3x3 convs) and the deformable conv of one RFA block."""

    off1_w: np.ndarray
    off1_b: np.ndarray
    off2_w: np.ndarray
    off2_b: np.ndarray
    dconv_w: np.ndarray
    dconv_b: np.ndarray
    mode: str = "small"

    def __post_init__(self):
        if self.mode not in RFA_MODES:
            raise ConfigurationError(f"rfa mode must be one of {RFA_MODES}, got {self.mode!r}")
        k = self.dconv_w.shape[2]
        if self.off2_w.shape[0] != 2 * k * k:
            raise ShapeError(f"offset net must emit {2 * k * k} channels, got {self.off2_w.shape[0]}")

    @staticmethod
    def array_names():
        return [f.name for f in fields(RfaParams) if f.name != "mode"]


@differentiable("rfa_align")
def rfa_align(f_ref: np.ndarray, f_lr: np.ndarray, flow: Optional[np.ndarray], p: RfaParams):
    """Align reference features to the LR content.

    ``large`` mode warps ``f_ref`` with ``flow``, predicts a residual offset from
    ``[warped | f_lr]`` and samples ``f_ref`` at ``flow + residual`` with the
    deformable conv.  ``small`` predicts offsets from ``[f_ref | f_lr]`` with no
    flow.  ``conv`` is the zero-offset ablation: a plain convolution of ``f_ref``.
    The flow is a constant.  ``vjp(g)`` returns ``(d_ref, d_lr, grads)`` with
    ``grads`` keyed by :class:`RfaParams` field name.
    """
    if f_ref.shape != f_lr.shape:
        raise ShapeError(f"f_ref {f_ref.shape} and f_lr {f_lr.shape} differ")
    if p.mode == "large" and flow is None:
        raise ConfigurationError("large RFA needs a flow field")
    k = p.dconv_w.shape[2]

    if p.mode == "conv":
        out, vjp_c = conv2d(f_ref, p.dconv_w, p.dconv_b)

        def vjp_conv(g):
            dref, dw, db = vjp_c(g)
            grads = {name: np.zeros_like(getattr(p, name)) for name in RfaParams.array_names()}
            grads["dconv_w"], grads["dconv_b"] = dw, db
            return dref, np.zeros_like(f_lr), grads

        return out, vjp_conv

    c = f_ref.shape[1]
    vjp_warp = None
    if p.mode == "large":
        guide, vjp_warp = bilinear_warp(f_ref, flow.astype(f_ref.dtype))
    else:
        guide = f_ref
    h1, vjp1 = conv2d(np.concatenate([guide, f_lr], axis=1), p.off1_w, p.off1_b)
    mask = h1 > 0
    delta, vjp2 = conv2d(h1 * mask, p.off2_w, p.off2_b)
    offsets = delta + broadcast_flow(flow.astype(delta.dtype), k) if p.mode == "large" else delta
    out, vjp_d = deformable_conv(f_ref, p.dconv_w, p.dconv_b, offsets)

    def vjp(g):
        dref, dwd, dbd, doff = vjp_d(g)
        dh, dw2, db2 = vjp2(doff)
        dcat, dw1, db1 = vjp1(dh * mask)
        dguide, dlr = dcat[:, :c], dcat[:, c:]
        if vjp_warp is not None:
            dref = dref + vjp_warp(dguide)[0]
        else:
            dref = dref + dguide
        grads = dict(off1_w=dw1, off1_b=db1, off2_w=dw2, off2_b=db2, dconv_w=dwd, dconv_b=dbd)
        return dref, dlr, grads

    return out, vjp


# --- CoFA -------------------------------------------------------------------

@dataclass
class CofaParams:
    g1_w: np.ndarray
    g1_b: np.ndarray
    g2_w: np.ndarray
    g2_b: np.ndarray

    def __post_init__(self):
        if self.g1_w.shape[0] != self.g2_w.shape[0]:
            raise ShapeError("g1 and g2 must share their output width")


@differentiable("similarity_score")
def similarity_score(f_refA: np.ndarray, f_lr: np.ndarray, p: CofaParams):
    """Per-pixel ``sigmoid(<g1(f_refA), g2(f_lr)>)``, shape (N, 1, H, W).

    ``vjp(g)`` returns ``(d_refA, d_lr, grads)``.
    """
    if f_refA.shape != f_lr.shape:
        raise ShapeError(f"f_refA {f_refA.shape} and f_lr {f_lr.shape} differ")
    a, vjp_a = conv2d(f_refA, p.g1_w, p.g1_b)
    b, vjp_b = conv2d(f_lr, p.g2_w, p.g2_b)
    mu = sigmoid((a * b).sum(axis=1, keepdims=True))

    def vjp(g):
        gz = g * mu * (1.0 - mu)
        da_in, dw1, db1 = vjp_a(gz * b)
        db_in, dw2, db2 = vjp_b(gz * a)
        return da_in, db_in, dict(g1_w=dw1, g1_b=db1, g2_w=dw2, g2_b=db2)

    return mu, vjp


def _ordered_sum(stack: np.ndarray) -> np.ndarray:
    # summing in sorted order makes the result independent of list order
    s = np.sort(stack, axis=0)
    out = s[0].copy()
    for t in s[1:]:
        out += t
    return out


def _check_set(aligned: Sequence[np.ndarray]):
    if len(aligned) == 0:
        raise ParameterError("reference set is empty")
    shape = aligned[0].shape
    for f in aligned:
        check4(f)
        if f.shape != shape:
            raise ShapeError(f"aligned features differ in shape: {f.shape} vs {shape}")


@differentiable("cofa_aggregate")
def cofa_aggregate(aligned: Sequence[np.ndarray], scores: Sequence[np.ndarray]):
    """Score-weighted pixelwise mean ``sum(mu_i F_i) / sum(mu_i)``.

    Scores are (N, 1, H, W) and broadcast over channels.  The result is
    clipped into the per-element [min, max] of the set, which only removes
    rounding excursions.  ``vjp(g)`` returns ``(d_aligned, d_scores)`` lists.
    """
    _check_set(aligned)
    if len(scores) != len(aligned):
        raise ShapeError(f"{len(scores)} scores for {len(aligned)} features")
    n, c, h, w = aligned[0].shape
    for s in scores:
        if s.shape != (n, 1, h, w):
            raise ShapeError(f"score shape {s.shape}, expected {(n, 1, h, w)}")
    feats = np.stack(aligned)
    mus = np.stack(scores)
    den = _ordered_sum(mus)
    num = _ordered_sum(mus * feats)
    out = np.clip(num / den, feats.min(axis=0), feats.max(axis=0))

    def vjp(g):
        d_aligned = [g * m / den for m in scores]
        d_scores = [(g * (f - out)).sum(axis=1, keepdims=True) / den for f in aligned]
        return d_aligned, d_scores

    return out, vjp


@differentiable("aggregate_baseline")
def aggregate_baseline(aligned: Sequence[np.ndarray], kind: str = "average"):
    """Unconditioned set pooling: elementwise ``average`` or ``maxpool``."""
    _check_set(aligned)
    feats = np.stack(aligned)
    n_set = len(aligned)
    if kind == "average":
        out = _ordered_sum(feats) / n_set
        return out, lambda g: ([g / n_set for _ in aligned],)
    if kind == "maxpool":
        arg = feats.argmax(axis=0)
        out = np.take_along_axis(feats, arg[None], axis=0)[0]

        def vjp(g):
            return ([np.where(arg == i, g, 0.0).astype(g.dtype) for i in range(n_set)],)

        return out, vjp
    raise ParameterError(f"unknown aggregation {kind!r}")
