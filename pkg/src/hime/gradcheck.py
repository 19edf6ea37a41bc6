"""Central finite-difference checks for every op that exposes a vjp.

``SUITE`` maps each name in :data:`hime.tensor.DIFFERENTIABLE_OPS` to a case
builder; :func:`run_suite` fails loudly when an op has no case.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import alignment, diffops, losses, model as hm, tensor
from .alignment import CofaParams, RfaParams
from .tensor import DIFFERENTIABLE_OPS

STEP = 1e-5
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


class UnsupportedError(TypeError):
    """The callable under test does not return an ``(out, vjp)`` pair."""


@dataclass
class Report:
    label: str
    errors: List[float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-8)``."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def _call(fn, inputs):
    res = fn(inputs)
    if not (isinstance(res, tuple) and len(res) == 2 and callable(res[1])):
        raise UnsupportedError("op under test must return (out, vjp)")
    return res


def gradcheck(fn: Callable, inputs: Sequence[np.ndarray], tolerance: float = OP_TOLERANCE,
              step: float = STEP, seed: int = 0,
              coords: Optional[Sequence[Tuple[int, int]]] = None, label: str = "") -> Report:
    """Compare ``fn``'s vjp against central differences of ``<cot, fn(x)>``.

    ``fn(list_of_arrays)`` returns ``(out, vjp)`` and ``vjp(cot)`` returns one
    cotangent per input.  With ``coords`` (pairs of input index and flat
    element index) only those elements are differenced and one pooled error
    is reported; otherwise every element of every input is, one error per
    input.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    out, vjp = _call(fn, inputs)
    rng = np.random.default_rng(seed)
    scalar = np.ndim(out) == 0
    cot = 1.0 if scalar else rng.standard_normal(np.shape(out))
    analytic = [np.asarray(g, dtype=np.float64) for g in vjp(cot)]
    if len(analytic) != len(inputs):
        raise UnsupportedError(f"vjp returned {len(analytic)} cotangents for {len(inputs)} inputs")

    def probe(i, j):
        x = inputs[i].reshape(-1)
        orig = x[j]
        x[j] = orig + step
        fp = np.sum(cot * np.asarray(fn(inputs)[0]))
        x[j] = orig - step
        fm = np.sum(cot * np.asarray(fn(inputs)[0]))
        x[j] = orig
        return (fp - fm) / (2 * step)

    if coords is not None:
        a = np.array([analytic[i].reshape(-1)[j] for i, j in coords])
        n = np.array([probe(i, j) for i, j in coords])
        return Report(label, [rel_error(a, n)], tolerance)
    errors = []
    for i, x in enumerate(inputs):
        num = np.array([probe(i, j) for j in range(x.size)]).reshape(x.shape)
        errors.append(rel_error(analytic[i], num))
    return Report(label, errors, tolerance)


# --- suite ------------------------------------------------------------------

Case = Tuple[str, Callable, List[np.ndarray], float]
SUITE: Dict[str, Callable[[np.random.Generator], List[Case]]] = {}


def case(name):
    def deco(fn):
        SUITE[name] = fn
        return fn
    return deco


def _away_from_integers(rng, shape, lo, hi, margin=0.05):
    """Uniform values whose fractional part stays inside [margin, 1 - margin]."""
    whole = rng.integers(int(np.floor(lo)), int(np.ceil(hi)), size=shape)
    return whole + rng.uniform(margin, 1 - margin, size=shape)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-30) * (margin + np.abs(x)), x)


@case("ew_binary")
def _ew(rng):
    a = rng.standard_normal((1, 3, 4, 4))
    return [
        ("add", lambda v: tensor.ew_binary(v[0], v[1], "add"), [a, rng.standard_normal(a.shape)], OP_TOLERANCE),
        ("mul-channel", lambda v: tensor.ew_binary(v[0], v[1], "mul"), [a, rng.standard_normal((1, 3, 1, 1))], OP_TOLERANCE),
        ("sub-spatial", lambda v: tensor.ew_binary(v[0], v[1], "sub"), [a, rng.standard_normal((1, 1, 4, 4))], OP_TOLERANCE),
    ]


@case("channel_mean")
def _cmean(rng):
    return [("", lambda v: tensor.channel_mean(v[0]), [rng.standard_normal((1, 3, 4, 4))], OP_TOLERANCE)]


@case("activation")
def _act(rng):
    x = _away_from_zero(rng, (1, 3, 4, 4))
    return [
        ("relu", lambda v: tensor.activation(v[0], "relu"), [x], OP_TOLERANCE),
        ("sigmoid", lambda v: tensor.activation(v[0], "sigmoid"), [x], OP_TOLERANCE),
    ]


@case("conv2d")
def _conv(rng):
    x = rng.standard_normal((1, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal((1, 4, 1, 1))
    return [
        ("3x3", lambda v: diffops.conv2d(*v), [x, w, b], OP_TOLERANCE),
        ("stride2", lambda v: diffops.conv2d(*v, stride=2), [x, w, b], OP_TOLERANCE),
        ("1x1", lambda v: diffops.conv2d(*v), [x, rng.standard_normal((2, 3, 1, 1)),
                                                    rng.standard_normal((1, 2, 1, 1))], OP_TOLERANCE),
    ]


@case("residual_block")
def _res(rng):
    c = 4
    ins = [rng.standard_normal((1, c, 5, 5))]
    for _ in range(2):
        ins += [0.3 * rng.standard_normal((c, c, 3, 3)), 0.1 * rng.standard_normal((1, c, 1, 1))]
    return [("", lambda v: diffops.residual_block(*v), ins, OP_TOLERANCE)]


@case("space_to_depth")
def _s2d(rng):
    return [("r2", lambda v: diffops.space_to_depth(v[0], 2), [rng.standard_normal((1, 2, 4, 6))], OP_TOLERANCE)]


@case("pixel_shuffle")
def _ps(rng):
    return [("r2", lambda v: diffops.pixel_shuffle(v[0], 2), [rng.standard_normal((1, 4, 3, 3))], OP_TOLERANCE)]


@case("bilinear_warp")
def _warp(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    flow = _away_from_integers(rng, (1, 2, 5, 5), -1.5, 1.5)
    return [("", lambda v: diffops.bilinear_warp(v[0], v[1]), [x, flow], OP_TOLERANCE)]


@case("deformable_conv")
def _dconv(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal((1, 3, 1, 1))
    off = _away_from_integers(rng, (1, 18, 5, 5), -1.5, 1.5)
    return [("", lambda v: diffops.deformable_conv(*v), [x, w, b, off], OP_TOLERANCE)]


@case("bicubic_resize")
def _bicubic(rng):
    return [
        ("up2", lambda v: diffops.bicubic_resize(v[0], 2), [rng.standard_normal((1, 2, 4, 4))], OP_TOLERANCE),
        ("down2", lambda v: diffops.bicubic_resize(v[0], 0.5), [rng.standard_normal((1, 2, 6, 6))], OP_TOLERANCE),
    ]


def _rfa_inputs(rng, c=4, h=6):
    f_ref = rng.standard_normal((1, c, h, h))
    f_lr = rng.standard_normal((1, c, h, h))
    params = [0.2 * rng.standard_normal((c, 2 * c, 3, 3)), 0.1 * rng.standard_normal((1, c, 1, 1)),
              0.05 * rng.standard_normal((18, c, 3, 3)), 0.05 * rng.standard_normal((1, 18, 1, 1)),
              0.3 * rng.standard_normal((c, c, 3, 3)), 0.1 * rng.standard_normal((1, c, 1, 1))]
    return f_ref, f_lr, params


def _rfa_fn(mode, flow):
    names = RfaParams.array_names()

    def fn(v):
        p = RfaParams(**dict(zip(names, v[2:])), mode=mode)
        out, vjp = alignment.rfa_align(v[0], v[1], flow, p)

        def flat(g):
            dref, dlr, grads = vjp(g)
            return [dref, dlr] + [grads[k] for k in names]

        return out, flat

    return fn


@case("rfa_align")
def _rfa(rng):
    cases = []
    for mode in ("small", "large", "conv"):
        f_ref, f_lr, params = _rfa_inputs(rng)
        flow = _away_from_integers(rng, (1, 2, 6, 6), -1.5, 1.5) if mode == "large" else None
        cases.append((mode, _rfa_fn(mode, flow), [f_ref, f_lr] + params, OP_TOLERANCE))
    return cases


@case("similarity_score")
def _sim(rng):
    c = 4
    ins = [rng.standard_normal((1, c, 6, 6)), rng.standard_normal((1, c, 6, 6)),
           0.5 * rng.standard_normal((c, c, 1, 1)), 0.1 * rng.standard_normal((1, c, 1, 1)),
           0.5 * rng.standard_normal((c, c, 1, 1)), 0.1 * rng.standard_normal((1, c, 1, 1))]

    def fn(v):
        out, vjp = alignment.similarity_score(v[0], v[1], CofaParams(*v[2:]))

        def flat(g):
            da, db, gr = vjp(g)
            return [da, db, gr["g1_w"], gr["g1_b"], gr["g2_w"], gr["g2_b"]]

        return out, flat

    return [("", fn, ins, OP_TOLERANCE)]


@case("cofa_aggregate")
def _cofa(rng):
    n_set = 3
    feats = [rng.standard_normal((1, 4, 5, 5)) for _ in range(n_set)]
    scores = [rng.uniform(0.1, 0.9, (1, 1, 5, 5)) for _ in range(n_set)]

    def fn(v):
        out, vjp = alignment.cofa_aggregate(v[:n_set], v[n_set:])

        def flat(g):
            da, ds = vjp(g)
            return list(da) + list(ds)

        return out, flat

    return [("", fn, feats + scores, OP_TOLERANCE)]


@case("aggregate_baseline")
def _aggb(rng):
    feats = [rng.standard_normal((1, 4, 5, 5)) for _ in range(3)]
    cases = []
    for kind in ("average", "maxpool"):
        def fn(v, kind=kind):
            out, vjp = alignment.aggregate_baseline(v, kind)
            return out, lambda g: list(vjp(g)[0])
        cases.append((kind, fn, feats, OP_TOLERANCE))
    return cases


def _sr_only(loss_fn, target):
    def fn(v):
        val, vjp = loss_fn(v[0], target)
        return val, lambda g: [vjp(g)[0]]
    return fn


@case("charbonnier")
def _charb(rng):
    hr = rng.standard_normal((1, 3, 4, 4))
    sr = hr + 0.01 * rng.standard_normal(hr.shape)
    return [("", _sr_only(losses.charbonnier, hr), [sr], OP_TOLERANCE)]


@case("correlation_map")
def _cmap(rng):
    x = rng.standard_normal((1, 3, 5, 5))
    return [
        ("k3d1", lambda v: losses.correlation_map(v[0], 3, 1), [x], OP_TOLERANCE),
        ("k3d2", lambda v: losses.correlation_map(v[0], 3, 2), [x], OP_TOLERANCE),
        ("k5d1", lambda v: losses.correlation_map(v[0], 5, 1), [x], OP_TOLERANCE),
    ]


def _kink_free(draw, gap, margin=1e-4, tries=200):
    """Redraw until every entry of ``gap(sample)`` is at least ``margin`` from zero."""
    for _ in range(tries):
        sample = draw()
        g = gap(sample)
        g = g[g != 0]  # taps outside the image are zero in both maps
        if g.size == 0 or np.abs(g).min() >= margin:
            return sample
    raise RuntimeError("could not draw a kink-free sample")


@case("correlation_loss")
def _closs(rng):
    hr = rng.standard_normal((1, 3, 5, 5))
    sr = _kink_free(lambda: rng.standard_normal(hr.shape),
                    lambda s: losses.correlation_map(s)[0] - losses.correlation_map(hr)[0])
    return [("", _sr_only(lambda a, b: losses.correlation_loss(a, b, 3, 1), hr), [sr], OP_TOLERANCE)]


@case("feature_l1")
def _fl1(rng):
    hr = rng.standard_normal((1, 4, 4, 4))
    sr = _kink_free(lambda: rng.standard_normal(hr.shape), lambda s: s - hr)
    return [("", _sr_only(losses.feature_l1, hr), [sr], OP_TOLERANCE)]


# --- model stages -----------------------------------------------------------

def tiny_model(seed: int = 0, **kw) -> hm.HimeModel:
    cfg = hm.HimeConfig(**{**dict(s=2, n_refs=2, k_l=1, k_h=1, k_r=1, c_f=4, seed=seed), **kw})
    return hm.model_init(cfg, dtype=np.float64)


def _stage_fn(m: hm.HimeModel, stage, ids):
    """Adapt a registry-bound stage to ``[input, *params] -> (out, vjp)``."""

    def fn(v):
        for pid, val in zip(ids, v[1:]):
            m.registry[pid].value = val
        m.registry.zero_grad()
        out, back = stage(m, v[0])

        def flat(g):
            m.registry.zero_grad()
            dx = back(g)
            return [dx] + [m.registry[pid].grad.copy() for pid in ids]

        return out, flat

    return fn


def _stage_case(rng, stage, prefix, x):
    m = tiny_model(int(rng.integers(1 << 30)))
    ids = [pid for pid in m.registry.ids() if pid.startswith(prefix)]
    for pid in ids:  # random biases so no ReLU sits exactly at its kink
        if pid.endswith("bias"):
            m.registry[pid].value = 0.1 * rng.standard_normal(m.registry[pid].value.shape)
    return [("", _stage_fn(m, stage, ids), [x] + [m.registry[pid].value.copy() for pid in ids], OP_TOLERANCE)]


@case("extract_lr")
def _xlr(rng):
    return _stage_case(rng, hm.extract_lr, "lr_extract.", rng.uniform(0, 1, (1, 3, 6, 6)))


@case("extract_ref")
def _xref(rng):
    return _stage_case(rng, hm.extract_ref, "ref_extract.", rng.uniform(0, 1, (1, 3, 8, 8)))


@case("reconstruct")
def _xrec(rng):
    return _stage_case(rng, hm.reconstruct, "recon.", rng.standard_normal((1, 4, 4, 4)))


def end_to_end_case(rng, n_coords: int = 20, seed: int = 0):
    """Charbonnier + 0.1 * correlation loss of the toy model, (1,3,8,8) input, 2 refs."""
    m = hm.model_init(hm.HimeConfig.toy(n_refs=2, seed=seed), dtype=np.float64)
    for p in m.registry:
        if p.id.endswith("bias"):
            p.value = 0.05 * rng.standard_normal(p.value.shape)
    # the offset head starts at zero; give it weights so every path carries gradient
    off = m.registry["rfa.off2.weight"]
    off.value = 0.05 * rng.standard_normal(off.value.shape)
    lr = rng.uniform(0, 1, (1, 3, 8, 8))
    refs = [rng.uniform(0, 1, (1, 3, 32, 32)) for _ in range(2)]
    hr = rng.uniform(0, 1, (1, 3, 32, 32))
    ids = m.registry.ids()
    sizes = np.array([m.registry[pid].value.size for pid in ids])
    flat_pick = rng.choice(sizes.sum(), size=n_coords, replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for f in flat_pick:
        i = int(np.searchsorted(bounds, f, side="right"))
        coords.append((i, int(f - (bounds[i - 1] if i else 0))))

    def fn(v):
        for pid, val in zip(ids, v):
            m.registry[pid].value = val
        m.registry.zero_grad()
        sr, back = hm.hime_forward(m, lr, refs)
        total, _, vjp = losses.combined_loss(sr, hr, weights=losses.LossWeights(1.0, 0.0, 0.0, 0.1))

        def flat(g):
            m.registry.zero_grad()
            back(vjp(g)[0])
            return [m.registry[pid].grad.copy() for pid in ids]

        return total, flat

    return fn, [m.registry[pid].value.copy() for pid in ids], coords


@case("hime_forward")
def _e2e(rng):
    fn, ins, coords = end_to_end_case(rng)
    return [("e2e-20-params", (fn, coords), ins, MODEL_TOLERANCE)]


def run_suite(names: Optional[Sequence[str]] = None, tolerance: Optional[float] = None,
              seed: int = 0) -> List[Tuple[str, Report]]:
    """Run the checks for ``names`` (default: every registered op)."""
    missing = sorted(set(DIFFERENTIABLE_OPS) - set(SUITE))
    if missing:
        raise RuntimeError(f"differentiable ops without a gradient check: {missing}")
    names = sorted(SUITE) if names is None else list(names)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown ops {unknown}; available: {sorted(SUITE)}")
    rows = []
    for name in names:
        rng = np.random.default_rng([seed, sorted(SUITE).index(name)])
        for label, fn, inputs, tol in SUITE[name](rng):
            tol = tol if tolerance is None else tolerance
            coords = None
            if isinstance(fn, tuple):
                fn, coords = fn
            rep = gradcheck(fn, inputs, tolerance=tol, coords=coords, label=label, seed=seed)
            rows.append((name, rep))
    return rows
