"""Dense NCHW tensors, a handful of elementwise ops and the vjp contract.

A tensor here is just a 4-d ``numpy.ndarray`` laid out as (batch, channel,
height, width).  Every differentiable op returns ``(out, vjp)`` where ``vjp``
maps the cotangent of ``out`` to a tuple of cotangents, one per
differentiable input, in argument order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, Sequence, Tuple

import numpy as np

VjpFn = Callable[[np.ndarray], Tuple[np.ndarray, ...]]

#: Names of every op exposing a vjp.  The gradcheck suite is built from this.
DIFFERENTIABLE_OPS: Dict[str, Callable] = {}


class ShapeError(ValueError):
    """Raised when tensor shapes violate an op's precondition."""


class ParameterError(ValueError):
    """Raised for out-of-contract scalar arguments (kernel size, scale, ...)."""


class ConfigurationError(ValueError):
    """Raised for inconsistent model or run configuration."""


class FormatError(ValueError):
    """Raised when a file does not match a supported on-disk format."""


def differentiable(name: str):
    """Register ``fn`` under ``name`` in :data:`DIFFERENTIABLE_OPS`."""

    def deco(fn):
        DIFFERENTIABLE_OPS[name] = fn
        return fn

    return deco


def tensor_create(shape: Sequence[int], fill=0.0, dtype=np.float64) -> np.ndarray:
    """Build an NCHW tensor from a scalar fill or a flat row-major array."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4 or any(s < 0 for s in shape):
        raise ShapeError(f"expected 4 non-negative dims, got {shape}")
    if np.isscalar(fill):
        return np.full(shape, fill, dtype=dtype)
    flat = np.asarray(fill, dtype=dtype).ravel()
    if flat.size != int(np.prod(shape)):
        raise ShapeError(f"{flat.size} values cannot fill shape {shape}")
    return flat.reshape(shape).copy()


def check4(x: np.ndarray, name: str = "tensor") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be NCHW, got shape {x.shape}")


def _broadcast_axes(a_shape, b_shape) -> Tuple[int, ...]:
    if a_shape == b_shape:
        return ()
    n, c, h, w = a_shape
    if b_shape == (1, c, 1, 1):
        return (0, 2, 3)
    if b_shape == (1, 1, h, w):
        return (0, 1)
    raise ShapeError(f"cannot broadcast {b_shape} against {a_shape}")


@differentiable("ew_binary")
def ew_binary(a: np.ndarray, b: np.ndarray, op: str) -> Tuple[np.ndarray, VjpFn]:
    """Elementwise ``add``/``sub``/``mul``; ``b`` may be (1,C,1,1) or (1,1,H,W)."""
    check4(a, "a")
    check4(b, "b")
    axes = _broadcast_axes(a.shape, b.shape)

    def reduce(g):
        return g.sum(axis=axes, keepdims=True) if axes else g

    if op == "add":
        return a + b, lambda g: (g, reduce(g))
    if op == "sub":
        return a - b, lambda g: (g, -reduce(g))
    if op == "mul":
        return a * b, lambda g: (g * b, reduce(g * a))
    raise ParameterError(f"unknown elementwise op {op!r}")


@differentiable("channel_mean")
def channel_mean(a: np.ndarray) -> Tuple[np.ndarray, VjpFn]:
    """Per-sample, per-channel spatial mean, shape (N, C, 1, 1)."""
    check4(a)
    hw = a.shape[2] * a.shape[3]
    if hw == 0:
        raise ShapeError("channel_mean of an empty spatial extent")
    shape = a.shape

    def vjp(g):
        return (np.broadcast_to(g / hw, shape).copy(),)

    return a.mean(axis=(2, 3), keepdims=True), vjp


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@differentiable("activation")
def activation(a: np.ndarray, kind: str) -> Tuple[np.ndarray, VjpFn]:
    if kind == "relu":
        mask = a > 0
        return np.where(mask, a, 0.0).astype(a.dtype), lambda g: (g * mask,)
    if kind == "sigmoid":
        s = sigmoid(a)
        return s, lambda g: (g * s * (1.0 - s),)
    raise ParameterError(f"unknown activation {kind!r}")


@dataclass
class Param:
    """A learnable tensor with its accumulated gradient."""

    id: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0


class Registry:
    """Ordered, id-addressable collection of :class:`Param`."""

    def __init__(self):
        self._params: Dict[str, Param] = {}

    def add(self, pid: str, value: np.ndarray) -> Param:
        if pid in self._params:
            raise KeyError(f"duplicate parameter id {pid!r}")
        p = Param(pid, value)
        self._params[pid] = p
        return p

    def __getitem__(self, pid: str) -> Param:
        return self._params[pid]

    def __contains__(self, pid: str) -> bool:
        return pid in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def ids(self):
        return list(self._params)

    def count(self) -> int:
        """Total number of scalar parameters."""
        return sum(p.value.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def astype(self, dtype) -> None:
        for p in self:
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)


# --- HTF tensor files -------------------------------------------------------

_HTF_MAGIC = b"HTF1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def htf_dumps(t: np.ndarray) -> bytes:
    check4(t)
    if t.dtype == np.float32:
        code = 0
    elif t.dtype == np.float64:
        code = 1
    else:
        raise FormatError(f"HTF stores f32/f64 only, got {t.dtype}")
    header = _HTF_MAGIC + struct.pack("<B4I", code, *t.shape)
    return header + np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes()


def htf_loads(buf: bytes, offset: int = 0) -> Tuple[np.ndarray, int]:
    """Decode one HTF record at ``offset``; return the tensor and the end offset."""
    head = buf[offset:offset + 21]
    if len(head) < 21 or head[:4] != _HTF_MAGIC:
        raise FormatError(f"not an HTF tensor (header {bytes(head[:8])!r})")
    code, *dims = struct.unpack("<B4I", head[4:])
    if code not in _DTYPES:
        raise FormatError(f"unknown HTF dtype byte {code}")
    dt = _DTYPES[code]
    n = int(np.prod(dims))
    start = offset + 21
    end = start + n * dt.itemsize
    if len(buf) < end:
        raise FormatError("truncated HTF payload")
    arr = np.frombuffer(buf[start:end], dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return arr, end


def save_htf(path, t: np.ndarray) -> None:
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, htf_dumps(t))


def load_htf(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    t, end = htf_loads(buf)
    if end != len(buf):
        raise FormatError(f"{len(buf) - end} trailing bytes after HTF tensor")
    return t


def pairwise_sum(items: Iterable[np.ndarray]) -> np.ndarray:
    """Tree reduction in list order; fixed association keeps results reproducible."""
    items = list(items)
    while len(items) > 1:
        nxt = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            nxt.append(items[-1])
        items = nxt
    return items[0]
