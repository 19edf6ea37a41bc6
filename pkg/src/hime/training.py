"""Adam, the synthetic multi-exemplar task and the desk-scale training loop."""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.ndimage import affine_transform

from .alignment import block_match_flow
from .diffops import bicubic_resize
from .fileio import atomic_write_bytes
from .imaging import make_lr, psnr, save_image, ssim
from .losses import LossWeights, combined_loss
from .model import HimeConfig, HimeModel, extract_lr, hime_forward, model_init, save_checkpoint
from .tensor import ConfigurationError, ParameterError, Registry

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3
CSV_HEADER = ("iter", "l_rec", "l_cor", "l_per", "total", "psnr_holdout")


# --- optimiser --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(registry: Registry, state: AdamState) -> AdamState:
    """One bias-corrected Adam update of every parameter; gradients are zeroed afterwards."""
    for p in registry:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.id!r}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p in registry:
        m = state.m.setdefault(p.id, np.zeros_like(p.value))
        v = state.v.setdefault(p.id, np.zeros_like(p.value))
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= step.astype(p.value.dtype)
        p.zero_grad()
    return state


# --- synthetic data ---------------------------------------------------------

FLIP_MODES = ("none", "uneven", "even")


@dataclass(frozen=True)
class SynthSpec:
    """Procedural face-like textures with exemplars under random similarity transforms.

    ``flip_mode``: ``none``; ``uneven`` flips either the target (LR and HR) or
    the whole reference set, never both; ``even`` flips target and references
    together.  Each flip happens with probability 1/2.

    With ``snap_translation`` each reference translation is rounded to a
    multiple of ``s``, a whole LR pixel, which LR-grid alignment can represent
    exactly; rotation and scale then leave only a sub-pixel residual.
    """

    size: int = 64
    s: int = 4
    n_refs: int = 3
    max_translate: float = 4.0
    max_rotate: float = 1.0
    scale_range: Tuple[float, float] = (0.99, 1.01)
    seed: int = 0
    flip_mode: str = "none"
    count: Optional[int] = None
    snap_translation: bool = True

    def __post_init__(self):
        if self.size % self.s:
            raise ParameterError(f"size {self.size} not divisible by s={self.s}")
        if self.max_translate < 0 or self.max_rotate < 0 or self.n_refs < 0:
            raise ParameterError("geometry ranges and n_refs must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ParameterError(f"bad scale range {self.scale_range}")
        if self.flip_mode not in FLIP_MODES:
            raise ParameterError(f"flip_mode must be one of {FLIP_MODES}")


class Sample(NamedTuple):
    lr: np.ndarray
    hr: np.ndarray
    refs: List[np.ndarray]
    flip: str  # "", "target", "refs" or "all"


def render_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """One (1, 3, size, size) face-like image in [0, 1].

    Smooth colour blobs and a soft elliptical head for the low band, a hard
    hair-line edge, and windowed oriented gratings above the LR Nyquist
    limit for the detail only exemplars can supply.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u, v = xx / size - 0.5, yy / size - 0.5
    base = rng.uniform(0.25, 0.6, 3)
    img = base[:, None, None] + rng.uniform(-0.15, 0.15, (3, 1, 1)) * u + rng.uniform(-0.15, 0.15, (3, 1, 1)) * v

    cy, cx = rng.uniform(-0.1, 0.1, 2)
    ry, rx = rng.uniform(0.28, 0.4), rng.uniform(0.2, 0.32)
    head = 1.0 / (1.0 + np.exp(-(1.0 - ((v - cy) / ry) ** 2 - ((u - cx) / rx) ** 2) * 8.0))
    skin = rng.uniform(0.45, 0.85, 3)
    img = img * (1 - head) + skin[:, None, None] * head

    for _ in range(rng.integers(3, 6)):
        by, bx = rng.uniform(-0.4, 0.4, 2)
        sig = rng.uniform(0.05, 0.15)
        amp = rng.uniform(-0.25, 0.25, 3)
        img = img + amp[:, None, None] * np.exp(-((u - bx) ** 2 + (v - by) ** 2) / (2 * sig * sig))

    # hair line: a tilted, gently curved hard edge across the top
    tilt, curve, level = rng.uniform(-0.3, 0.3), rng.uniform(-1.0, 1.0), rng.uniform(-0.35, -0.15)
    hair = (v < level + tilt * u + curve * u * u).astype(np.float64)
    dark = rng.uniform(0.05, 0.3, 3)
    img = img * (1 - hair) + dark[:, None, None] * hair

    detail = np.zeros_like(u)
    for _ in range(rng.integers(3, 6)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(0.16, 0.3) * size
        phase = rng.uniform(0, 2 * np.pi)
        gy, gx = rng.uniform(-0.3, 0.3, 2)
        sig = rng.uniform(0.12, 0.25)
        env = np.exp(-((u - gx) ** 2 + (v - gy) ** 2) / (2 * sig * sig))
        wave = np.sin(2 * np.pi * freq * (u * np.cos(theta) + v * np.sin(theta)) + phase)
        detail += rng.uniform(0.08, 0.18) * env * wave
    tint = rng.uniform(0.8, 1.0, 3)
    img = img + tint[:, None, None] * detail[None]
    return np.clip(img, 0.0, 1.0)[None]


def similarity_warp(img: np.ndarray, angle_deg: float, scale: float, ty: float, tx: float) -> np.ndarray:
    """Resample ``img`` (1,C,H,W) under a similarity transform about its centre.

    ``out(p) = img(c + R(p - c - t) / scale)`` with ``t = (ty, tx)``, so a pure
    translation gives ``out(p) = img(p - t)``.  Bilinear, clamped edges.
    """
    _, c, h, w = img.shape
    a = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]]) / scale
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - rot @ (centre + np.array([ty, tx]))
    out = np.stack([affine_transform(img[0, i], rot, offset=offset, order=1, mode="nearest")
                    for i in range(c)])
    return out[None]


def make_sample(spec: SynthSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index, 0])
    hr = render_texture(rng, spec.size)
    refs = []
    for _ in range(spec.n_refs):
        ang = rng.uniform(-spec.max_rotate, spec.max_rotate)
        sc = rng.uniform(*spec.scale_range)
        ty, tx = rng.uniform(-spec.max_translate, spec.max_translate, 2)
        if spec.snap_translation:
            ty, tx = spec.s * np.round(ty / spec.s), spec.s * np.round(tx / spec.s)
        refs.append(similarity_warp(hr, ang, sc, ty, tx))
    lr = make_lr(hr, spec.s)

    flip = ""
    frng = np.random.default_rng([spec.seed, index, 1])
    if spec.flip_mode != "none" and frng.random() < 0.5:
        if spec.flip_mode == "even":
            flip = "all"
        else:
            flip = "target" if frng.random() < 0.5 else "refs"

    def hflip(t):
        return np.ascontiguousarray(t[..., ::-1])

    if flip in ("all", "target"):
        lr, hr = hflip(lr), hflip(hr)
    if flip in ("all", "refs"):
        refs = [hflip(r) for r in refs]
    return Sample(lr, hr, refs, flip)


def synth_dataset(spec: SynthSpec, start: int = 0) -> Iterator[Sample]:
    """Deterministic stream of samples; ``spec.count=None`` streams forever."""
    i = start
    while spec.count is None or i < start + spec.count:
        yield make_sample(spec, i)
        i += 1


def collate(samples: List[Sample], dtype=np.float32):
    lr = np.concatenate([s.lr for s in samples]).astype(dtype)
    hr = np.concatenate([s.hr for s in samples]).astype(dtype)
    n_refs = len(samples[0].refs)
    refs = [np.concatenate([s.refs[i] for s in samples]).astype(dtype) for i in range(n_refs)]
    return lr, hr, refs


def estimate_flows(lr: np.ndarray, refs: List[np.ndarray], s: int, radius: int = 2) -> List[np.ndarray]:
    """Block-matching flow from the LR grid into each downsampled reference."""
    return [block_match_flow(make_lr(r.astype(np.float64), s), lr.astype(np.float64),
                             search_radius=radius, block=4, levels=2).astype(lr.dtype)
            for r in refs]


# --- training loop ----------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: HimeModel
    log: List[Dict[str, float]]
    holdout: Dict[str, float]

    def csv_text(self) -> str:
        return log_to_csv(self.log)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def log_to_csv(rows: List[Dict[str, float]]) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(CSV_HEADER)
    for r in rows:
        wr.writerow([_fmt(r.get(k)) for k in CSV_HEADER])
    return buf.getvalue()


def evaluate(model: HimeModel, batch, flows=None) -> Dict[str, float]:
    """Mean per-image PSNR / SSIM of clamped SR and of plain bicubic on ``batch``."""
    lr, hr, refs = batch
    use = refs[:model.cfg.n_refs]
    fl = flows[:model.cfg.n_refs] if flows is not None and model.cfg.rfa_mode == "large" else None
    sr, _ = hime_forward(model, lr, use, fl if use else None)
    sr = np.clip(sr, 0.0, 1.0)
    bic = np.clip(bicubic_upsample(lr, model.cfg.s), 0.0, 1.0)
    out = {"psnr": [], "ssim": [], "psnr_bicubic": [], "ssim_bicubic": []}
    for i in range(lr.shape[0]):
        out["psnr"].append(psnr(sr[i:i + 1], hr[i:i + 1]))
        out["ssim"].append(ssim(sr[i:i + 1], hr[i:i + 1]))
        out["psnr_bicubic"].append(psnr(bic[i:i + 1], hr[i:i + 1]))
        out["ssim_bicubic"].append(ssim(bic[i:i + 1], hr[i:i + 1]))
    return {k: float(np.mean(v)) for k, v in out.items()}


def bicubic_upsample(lr: np.ndarray, s: int) -> np.ndarray:
    return bicubic_resize(lr, s)[0]


def holdout_batch(spec: SynthSpec, count: int = 8, dtype=np.float32):
    """A fixed evaluation set drawn from a disjoint seed."""
    hold = SynthSpec(**{**spec.__dict__, "seed": spec.seed + 1_000_003, "flip_mode": "none", "count": count})
    return collate(list(synth_dataset(hold)), dtype)


def train_toy(cfg: HimeConfig, spec: SynthSpec, iters: int, loss: str = "rec",
              lr: float = 1e-3, batch: int = 4, eval_every: int = 100,
              holdout: int = 8, k: int = 3, d: int = 1,
              out_dir=None, sample_every: int = 100) -> TrainResult:
    """Train ``cfg`` on the synthetic task for ``iters`` Adam steps.

    ``loss`` is ``rec``, ``rec+cor`` or ``p`` (reconstruction + correlation +
    feature L1 through the LR extractor frozen at initialisation; no
    adversarial term).  With ``spec.count`` set the same ``count`` samples are
    cycled; otherwise every step draws fresh ones.  Writes ``checkpoint.hmc``, ``log.csv`` and sample
    triplets into ``out_dir`` when given.
    """
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    if spec.n_refs < cfg.n_refs:
        raise ConfigurationError(f"data provides {spec.n_refs} refs, model wants {cfg.n_refs}")
    weights = LossWeights.preset(loss)
    model = model_init(cfg)
    frozen = model.copy() if loss == "p" else None
    state = AdamState(lr=lr)
    large = cfg.rfa_mode == "large" and cfg.n_refs > 0
    hold = holdout_batch(spec, holdout)
    hold_flows = estimate_flows(hold[0], hold[2][:cfg.n_refs], cfg.s) if large else None
    out_dir = Path(out_dir) if out_dir is not None else None
    # a finite spec.count is a fixed training set, revisited in order
    stream = itertools.cycle(synth_dataset(spec)) if spec.count else synth_dataset(spec)
    rows: List[Dict[str, float]] = []
    last_good = model.copy()

    for it in range(1, iters + 1):
        b_lr, b_hr, b_refs = collate([next(stream) for _ in range(batch)])
        refs = b_refs[:cfg.n_refs]
        flows = estimate_flows(b_lr, refs, cfg.s) if large else None
        sr, back = hime_forward(model, b_lr, refs, flows)
        feats = None
        if frozen is not None:
            fea_sr, back_fea = extract_lr(frozen, sr)
            fea_hr, _ = extract_lr(frozen, b_hr)
            feats = (fea_sr, fea_hr)
        total, terms, vjp = combined_loss(sr, b_hr, feats=feats, weights=weights, k=k, d=d)
        if not math.isfinite(total) or total > DIVERGENCE_LIMIT:
            if out_dir is not None:
                save_checkpoint(out_dir / "checkpoint.hmc", last_good)
            raise TrainingDiverged(f"loss {total} at iteration {it}")
        for p in model.registry:
            last_good.registry[p.id].value[...] = p.value
        dsr, dfea = vjp(1.0)
        if dfea is not None:
            dsr = dsr + back_fea(dfea)
            frozen.registry.zero_grad()
        back(dsr.astype(sr.dtype))
        adam_step(model.registry, state)

        row = {"iter": it, "l_rec": terms["l_rec"], "l_cor": terms.get("l_cor"),
               "l_per": terms.get("l_per"), "total": total, "psnr_holdout": None}
        if it % eval_every == 0 or it == iters:
            row["psnr_holdout"] = evaluate(model, hold, hold_flows)["psnr"]
            log.info("iter %d total %.5f holdout psnr %.3f", it, total, row["psnr_holdout"])
        rows.append(row)
        if out_dir is not None and (it % sample_every == 0 or it == iters):
            _write_samples(out_dir, it, sr, b_lr, b_hr, cfg.s)
            save_checkpoint(out_dir / "checkpoint.hmc", model)
            atomic_write_bytes(out_dir / "log.csv", log_to_csv(rows).encode())

    return TrainResult(model, rows, evaluate(model, hold, hold_flows))


def _write_samples(out_dir: Path, it: int, sr, lr, hr, s):
    bic = bicubic_upsample(lr[:1], s)
    save_image(sr[:1].astype(np.float64), out_dir / f"iter{it:06d}_sr.png")
    save_image(bic.astype(np.float64), out_dir / f"iter{it:06d}_bicubic.png")
    save_image(hr[:1].astype(np.float64), out_dir / f"iter{it:06d}_gt.png")
