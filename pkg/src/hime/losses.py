"""Training objectives: Charbonnier, correlation loss, feature L1 and GAN terms."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .tensor import ParameterError, ShapeError, channel_mean, check4, differentiable, sigmoid

LOG_FLOOR = 1e-12


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")


@differentiable("charbonnier")
def charbonnier(sr: np.ndarray, hr: np.ndarray, eps: float = 1e-3):
    """Mean of ``sqrt((sr - hr)**2 + eps**2)``; vjp is w.r.t. ``sr`` only."""
    _same_shape(sr, hr)
    if eps <= 0:
        raise ParameterError("eps must be positive")
    diff = sr - hr
    root = np.sqrt(diff * diff + eps * eps)
    n = diff.size

    def vjp(g):
        return (g * diff / (n * root),)

    return float(root.mean()), vjp


def _displacements(k: int):
    r = (k - 1) // 2
    return [(i, j) for i in range(-r, r + 1) for j in range(-r, r + 1)]


@differentiable("correlation_map")
def correlation_map(img: np.ndarray, k: int = 3, d: int = 1):
    """Local correlation of each pixel with its k x k (dilated) neighbourhood.

    Channels are mean-centred per sample first.  Channel ``t = (i + r) * k +
    (j + r)`` holds ``<I(x, y), I(x - i*d, y - j*d)> / k**2`` where ``x`` runs
    along the width axis and ``y`` along the height axis; neighbours outside
    the image count as zero.  Output shape is (N, k*k, H, W).
    """
    check4(img)
    if k < 1 or k % 2 == 0:
        raise ParameterError(f"correlation window k must be odd and >= 1, got {k}")
    if d < 1:
        raise ParameterError(f"dilation must be >= 1, got {d}")
    n, c, h, w = img.shape
    mean, mean_vjp = channel_mean(img)
    cen = img - mean
    big = (k - 1) // 2 * d
    padded = np.pad(cen, ((0, 0), (0, 0), (big, big), (big, big)))
    norm = 1.0 / (k * k)
    disp = _displacements(k)

    def neighbour(i, j):
        y0, x0 = big - j * d, big - i * d
        return padded[:, :, y0:y0 + h, x0:x0 + w]

    out = np.empty((n, k * k, h, w), dtype=img.dtype)
    for t, (i, j) in enumerate(disp):
        out[:, t] = (cen * neighbour(i, j)).sum(axis=1) * norm

    def vjp(g):
        dpad = np.zeros_like(padded)
        dcen = np.zeros_like(cen)
        for t, (i, j) in enumerate(disp):
            gt = g[:, t:t + 1] * norm
            dcen += gt * neighbour(i, j)
            y0, x0 = big - j * d, big - i * d
            dpad[:, :, y0:y0 + h, x0:x0 + w] += gt * cen
        dcen += dpad[:, :, big:big + h, big:big + w]
        return (dcen - mean_vjp(dcen.sum(axis=(2, 3), keepdims=True))[0],)

    return out, vjp


@differentiable("correlation_loss")
def correlation_loss(sr: np.ndarray, hr: np.ndarray, k: int = 3, d: int = 1):
    """Mean absolute difference between the correlation maps of ``sr`` and ``hr``."""
    _same_shape(sr, hr)
    m_sr, vjp_sr = correlation_map(sr, k, d)
    m_hr, _ = correlation_map(hr, k, d)
    diff = m_sr - m_hr

    def vjp(g):
        return vjp_sr(g * np.sign(diff) / diff.size)

    return float(np.abs(diff).mean()), vjp


@differentiable("feature_l1")
def feature_l1(fea_sr: np.ndarray, fea_hr: np.ndarray):
    _same_shape(fea_sr, fea_hr)
    diff = fea_sr - fea_hr
    return float(np.abs(diff).mean()), lambda g: (g * np.sign(diff) / diff.size,)


def relativistic_losses(logits_hr: np.ndarray, logits_sr: np.ndarray) -> Tuple[float, float]:
    """Generator and discriminator losses of the relativistic average GAN.

    Returns ``(L_adv, L_D)`` given raw discriminator outputs for a batch of
    real and generated images.
    """
    c_hr = np.asarray(logits_hr, dtype=np.float64).ravel()
    c_sr = np.asarray(logits_sr, dtype=np.float64).ravel()
    if c_hr.size == 0 or c_sr.size == 0:
        raise ParameterError("relativistic losses need a non-empty batch")
    if c_hr.shape != c_sr.shape:
        raise ShapeError(f"logit shapes differ: {c_hr.shape} vs {c_sr.shape}")
    z_hr = c_hr - c_sr.mean()  # D_Ra(HR, SR) = sigmoid(z_hr)
    z_sr = c_sr - c_hr.mean()

    def log(p):
        return np.log(np.maximum(p, LOG_FLOOR))

    l_adv = -log(sigmoid(-z_hr)).mean() - log(sigmoid(z_sr)).mean()
    l_d = -log(sigmoid(z_hr)).mean() - log(sigmoid(-z_sr)).mean()
    return float(l_adv), float(l_d)


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 1.0
    lambda_adv: float = 0.1
    lambda_per: float = 0.01
    lambda_cor: float = 0.1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if v < 0:
                raise ParameterError(f"{name} must be non-negative, got {v}")

    @classmethod
    def preset(cls, name: str) -> "LossWeights":
        """``rec`` (reconstruction only), ``rec+cor`` or ``p`` (full weighted objective)."""
        if name == "rec":
            return cls(1.0, 0.0, 0.0, 0.0)
        if name == "rec+cor":
            return cls(1.0, 0.0, 0.0, 0.1)
        if name == "p":
            return cls()
        raise ParameterError(f"unknown loss preset {name!r}")


def combined_loss(sr: np.ndarray, hr: np.ndarray,
                  feats: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                  logits: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                  weights: LossWeights = LossWeights(),
                  k: int = 3, d: int = 1, eps: float = 1e-3):
    """Weighted sum of the available loss terms.

    Returns ``(total, terms, vjp)``; ``terms`` maps ``l_rec``, ``l_cor`` and,
    when supplied, ``l_per`` / ``l_adv`` to their unweighted values.
    ``vjp(g)`` gives ``(d_sr, d_fea_sr)``; ``d_fea_sr`` is None without
    features.  Logits enter as constants (no gradient path).
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    l_rec, vjp_rec = charbonnier(sr, hr, eps)
    terms: Dict[str, float] = {"l_rec": l_rec}
    total = weights.lambda_rec * l_rec
    l_cor, vjp_cor = correlation_loss(sr, hr, k, d)
    terms["l_cor"] = l_cor
    total += weights.lambda_cor * l_cor
    vjp_per = None
    if feats is not None:
        l_per, vjp_per = feature_l1(*feats)
        terms["l_per"] = l_per
        total += weights.lambda_per * l_per
    if logits is not None:
        l_adv, _ = relativistic_losses(*logits)
        terms["l_adv"] = l_adv
        total += weights.lambda_adv * l_adv

    def vjp(g=1.0):
        dsr = vjp_rec(g * weights.lambda_rec)[0]
        if weights.lambda_cor > 0:
            dsr = dsr + vjp_cor(g * weights.lambda_cor)[0]
        dfea = vjp_per(g * weights.lambda_per)[0] if vjp_per is not None else None
        return dsr, dfea

    return float(total), terms, vjp
