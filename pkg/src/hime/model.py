"""The full multi-exemplar SR network and its checkpoint format.

Forward functions return ``(out, back)``.  ``back(g)`` accumulates parameter
gradients into ``model.registry`` and returns the cotangent of the image or
feature input.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .alignment import RFA_MODES, CofaParams, RfaParams, aggregate_baseline, cofa_aggregate, rfa_align, similarity_score
from .diffops import bicubic_resize, conv2d, icnr_init, pixel_shuffle, residual_block, space_to_depth, uniform_init
from .fileio import atomic_write_bytes
from .tensor import ConfigurationError, FormatError, Registry, ShapeError, differentiable, htf_dumps, htf_loads

AGG_MODES = ("cofa", "average", "maxpool")
DCONV_K = 3


@dataclass(frozen=True)
class HimeConfig:
    s: int = 4
    n_refs: int = 3
    k_l: int = 5
    k_h: int = 3
    k_r: int = 20
    c_f: int = 64
    rfa_mode: str = "small"
    cofa_mode: str = "cofa"
    seed: int = 0

    def __post_init__(self):
        if self.s not in (2, 4, 8):
            raise ConfigurationError(f"scale s must be 2, 4 or 8, got {self.s}")
        if min(self.n_refs, self.k_l, self.k_h, self.k_r) < 0 or self.c_f < 1:
            raise ConfigurationError("block counts must be >= 0 and c_f >= 1")
        if self.rfa_mode not in RFA_MODES:
            raise ConfigurationError(f"rfa_mode must be one of {RFA_MODES}")
        if self.cofa_mode not in AGG_MODES:
            raise ConfigurationError(f"cofa_mode must be one of {AGG_MODES}")

    @classmethod
    def toy(cls, **overrides) -> "HimeConfig":
        """Desk-scale widths and depths (c_f=16, k=2/1/4)."""
        base = dict(s=4, n_refs=3, k_l=2, k_h=1, k_r=4, c_f=16)
        base.update(overrides)
        return cls(**base)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def replace(self, **kw) -> "HimeConfig":
        return replace(self, **kw)


class HimeModel:
    def __init__(self, cfg: HimeConfig, registry: Registry):
        self.cfg = cfg
        self.registry = registry

    @property
    def dtype(self):
        return next(iter(self.registry)).value.dtype

    def copy(self) -> "HimeModel":
        return HimeModel(self.cfg, copy.deepcopy(self.registry))

    def astype(self, dtype) -> "HimeModel":
        self.registry.astype(dtype)
        return self

    def conv_names(self, prefix: str) -> List[str]:
        return sorted({pid.rsplit(".", 1)[0] for pid in self.registry.ids() if pid.startswith(prefix)})


def model_init(cfg: HimeConfig, dtype=np.float32) -> HimeModel:
    """Deterministic construction from ``cfg.seed``.

    Upsampling convs get ICNR weights; every other conv gets fan-in uniform
    weights.  Biases start at zero, and so does the offset head: the weights
    are still drawn to keep the stream, then cleared so the deformable conv
    starts as a plain conv.
    """
    if not isinstance(cfg, HimeConfig):
        raise ConfigurationError("model_init needs a HimeConfig")
    rng = np.random.default_rng(cfg.seed)
    reg = Registry()
    c = cfg.c_f

    def conv(name, c_in, c_out, k, icnr=False):
        shape = (c_out, c_in, k, k)
        if icnr:
            w = icnr_init(shape, 2, lambda sh: uniform_init(rng, sh))
        else:
            w = uniform_init(rng, shape)
        reg.add(f"{name}.weight", w.astype(dtype))
        reg.add(f"{name}.bias", np.zeros((1, c_out, 1, 1), dtype=dtype))

    def blocks(prefix, count):
        for i in range(count):
            conv(f"{prefix}.block{i}.conv1", c, c, 3)
            conv(f"{prefix}.block{i}.conv2", c, c, 3)

    conv("lr_extract.conv0", 3, c, 3)
    blocks("lr_extract", cfg.k_l)
    conv("ref_extract.mono", 3, 1, 1)
    conv("ref_extract.conv0", cfg.s * cfg.s, c, 3)
    blocks("ref_extract", cfg.k_h)
    conv("rfa.off1", 2 * c, c, 3)
    conv("rfa.off2", c, 2 * DCONV_K * DCONV_K, 3)
    reg["rfa.off2.weight"].value[...] = 0.0
    conv("rfa.dconv", c, c, DCONV_K)
    conv("cofa.g1", c, c, 1)
    conv("cofa.g2", c, c, 1)
    blocks("recon", cfg.k_r)
    for j in range(int(np.log2(cfg.s))):
        conv(f"recon.up{j}", c, 4 * c, 3, icnr=True)
    conv("recon.final", c, 3, 3)
    return HimeModel(cfg, reg)


# --- building blocks bound to the registry ------------------------------------

def _conv(m: HimeModel, x, name):
    w, b = m.registry[f"{name}.weight"], m.registry[f"{name}.bias"]
    y, vjp = conv2d(x, w.value, b.value)

    def back(g):
        dx, dw, db = vjp(g)
        w.grad += dw
        b.grad += db
        return dx

    return y, back


def _block(m: HimeModel, x, name):
    ps = [m.registry[f"{name}.conv{i}.{k}"] for i in (1, 2) for k in ("weight", "bias")]
    y, vjp = residual_block(x, *(p.value for p in ps))

    def back(g):
        dx, *dps = vjp(g)
        for p, d in zip(ps, dps):
            p.grad += d
        return dx

    return y, back


def _chain(backs):
    def back(g):
        for b in reversed(backs):
            g = b(g)
        return g

    return back


def _stack_blocks(m, x, prefix, count, backs):
    for i in range(count):
        x, b = _block(m, x, f"{prefix}.block{i}")
        backs.append(b)
    return x


@differentiable("extract_lr")
def extract_lr(model: HimeModel, i_lr: np.ndarray):
    """LR features (N, c_f, h, w): a conv then k_l residual blocks."""
    if i_lr.ndim != 4 or i_lr.shape[1] != 3:
        raise ShapeError(f"LR input must be (N,3,h,w), got {i_lr.shape}")
    backs = []
    x, b = _conv(model, i_lr, "lr_extract.conv0")
    backs.append(b)
    x = _stack_blocks(model, x, "lr_extract", model.cfg.k_l, backs)
    return x, _chain(backs)


@differentiable("extract_ref")
def extract_ref(model: HimeModel, i_ref: np.ndarray):
    """HR reference -> LR-space features via mono conv, space-to-depth, conv and k_h blocks."""
    s = model.cfg.s
    if i_ref.ndim != 4 or i_ref.shape[1] != 3:
        raise ShapeError(f"reference must be (N,3,H,W), got {i_ref.shape}")
    if i_ref.shape[2] % s or i_ref.shape[3] % s:
        raise ShapeError(f"reference size {i_ref.shape[2:]} not divisible by s={s}")
    backs = []
    x, b = _conv(model, i_ref, "ref_extract.mono")
    backs.append(b)
    x, vjp = space_to_depth(x, s)
    backs.append(lambda g: vjp(g)[0])
    x, b = _conv(model, x, "ref_extract.conv0")
    backs.append(b)
    x = _stack_blocks(model, x, "ref_extract", model.cfg.k_h, backs)
    return x, _chain(backs)


@differentiable("reconstruct")
def reconstruct(model: HimeModel, f_f: np.ndarray):
    """Residual image at s x the feature resolution."""
    cfg = model.cfg
    if f_f.ndim != 4 or f_f.shape[1] != cfg.c_f:
        raise ShapeError(f"fused feature must have {cfg.c_f} channels, got {f_f.shape}")
    backs = []
    x = _stack_blocks(model, f_f, "recon", cfg.k_r, backs)
    for j in range(int(np.log2(cfg.s))):
        x, b = _conv(model, x, f"recon.up{j}")
        backs.append(b)
        x, vjp = pixel_shuffle(x, 2)
        backs.append(lambda g, vjp=vjp: vjp(g)[0])
    x, b = _conv(model, x, "recon.final")
    backs.append(b)
    return x, _chain(backs)


def _rfa_params(model):
    r = model.registry
    names = dict(off1="rfa.off1", off2="rfa.off2", dconv="rfa.dconv")
    kw = {}
    for short, full in names.items():
        kw[f"{short}_w"] = r[f"{full}.weight"]
        kw[f"{short}_b"] = r[f"{full}.bias"]
    return kw


def _cofa_params(model):
    r = model.registry
    return {f"{g}_{k[0]}": r[f"cofa.{g}.{k}"] for g in ("g1", "g2") for k in ("weight", "bias")}


@differentiable("hime_forward")
def hime_forward(model: HimeModel, i_lr: np.ndarray, refs: Sequence[np.ndarray],
                 flows: Optional[Sequence[np.ndarray]] = None):
    """Super-resolve ``i_lr`` with an arbitrary-sized reference set.

    Returns ``(sr, back)``; ``sr`` is bicubic(i_lr) + reconstruct(F_a + F_L),
    unclamped.  With no references the aggregation path is skipped.
    """
    cfg = model.cfg
    refs = list(refs)
    n_set = len(refs)
    if cfg.rfa_mode == "large" and n_set and (flows is None or len(flows) != n_set):
        got = 0 if flows is None else len(flows)
        raise ConfigurationError(f"large RFA needs one flow per reference ({n_set} refs, {got} flows)")
    if flows is not None and len(flows) != n_set:
        raise ConfigurationError(f"{len(flows)} flows for {n_set} references")

    n = i_lr.shape[0]
    f_lr, back_lr = extract_lr(model, i_lr)
    up, _ = bicubic_resize(i_lr, cfg.s)

    back_set = None
    if n_set:
        stacked = np.concatenate(refs, axis=0)
        for r in refs:
            if r.shape != refs[0].shape or r.shape[0] != n:
                raise ShapeError("references must share one (N,3,sh,sw) shape")
        f_ref, back_ref = extract_ref(model, stacked)
        if f_ref.shape[2:] != f_lr.shape[2:]:
            raise ShapeError(f"reference features {f_ref.shape[2:]} do not match LR grid {f_lr.shape[2:]}")
        f_lr_rep = np.concatenate([f_lr] * n_set, axis=0)
        flow = np.concatenate(flows, axis=0) if cfg.rfa_mode == "large" else None
        rp = _rfa_params(model)
        aligned, vjp_rfa = rfa_align(f_ref, f_lr_rep, flow,
                                     RfaParams(**{k: v.value for k, v in rp.items()}, mode=cfg.rfa_mode))
        parts = np.split(aligned, n_set, axis=0)
        if cfg.cofa_mode == "cofa":
            cp = _cofa_params(model)
            mu, vjp_sim = similarity_score(aligned, f_lr_rep, CofaParams(**{k: v.value for k, v in cp.items()}))
            f_a, vjp_agg = cofa_aggregate(parts, np.split(mu, n_set, axis=0))
        else:
            f_a, vjp_agg = aggregate_baseline(parts, cfg.cofa_mode)
        f_f = f_a + f_lr

        def back_set(g):
            if cfg.cofa_mode == "cofa":
                d_parts, d_mu = vjp_agg(g)
                d_al_s, d_lr_s, gs = vjp_sim(np.concatenate(d_mu, axis=0))
                for k, v in gs.items():
                    cp[k].grad += v
                d_aligned = np.concatenate(d_parts, axis=0) + d_al_s
            else:
                (d_parts,) = vjp_agg(g)
                d_aligned = np.concatenate(d_parts, axis=0)
                d_lr_s = 0.0
            d_ref, d_lr_r, gr = vjp_rfa(d_aligned)
            for k, v in gr.items():
                rp[k].grad += v
            back_ref(d_ref)
            d_lr = d_lr_r + d_lr_s
            return sum(np.split(d_lr, n_set, axis=0)) if n_set > 1 else d_lr
    else:
        f_f = f_lr

    res, back_rec = reconstruct(model, f_f)
    sr = up + res

    def back(g):
        d_f = back_rec(g)
        d_lr = d_f
        if back_set is not None:
            d_lr = d_lr + back_set(d_f)
        return back_lr(d_lr)

    return sr, back


# --- checkpoints --------------------------------------------------------------

_HMC_MAGIC = b"HMC1"


def checkpoint_dumps(model: HimeModel) -> bytes:
    cfg = model.cfg.to_json().encode()
    out = [_HMC_MAGIC, struct.pack("<I", len(cfg)), cfg]
    for pid in sorted(model.registry.ids()):
        key = pid.encode()
        out += [struct.pack("<I", len(key)), key, htf_dumps(model.registry[pid].value)]
    return b"".join(out)


def checkpoint_loads(buf: bytes) -> HimeModel:
    if buf[:4] != _HMC_MAGIC:
        raise FormatError(f"not a checkpoint (header {bytes(buf[:8])!r})")
    (n,) = struct.unpack_from("<I", buf, 4)
    cfg = HimeConfig(**json.loads(buf[8:8 + n].decode()))
    off = 8 + n
    reg = Registry()
    while off < len(buf):
        (klen,) = struct.unpack_from("<I", buf, off)
        key = buf[off + 4:off + 4 + klen].decode()
        t, off = htf_loads(buf, off + 4 + klen)
        reg.add(key, t.copy())
    return HimeModel(cfg, reg)


def save_checkpoint(path, model: HimeModel) -> None:
    atomic_write_bytes(path, checkpoint_dumps(model))


def load_checkpoint(path) -> HimeModel:
    with open(path, "rb") as fh:
        return checkpoint_loads(fh.read())
