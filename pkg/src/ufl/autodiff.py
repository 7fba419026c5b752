"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

Operations executed while a :class:`Tape` is active append a record holding
their inputs, output and a backward rule.  Because records are appended in
execution order the tape is already topologically sorted, so
:func:`backward` simply walks it in reverse.

Only the operations needed by the encoder, the decoder and the softmax heads
are provided.  The single form of broadcasting supported is adding a bias
vector along the channel/feature axis.
"""

from __future__ import annotations

import contextvars
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "conv2d",
    "exp",
    "get_dtype",
    "l2_normalize",
    "linear",
    "log",
    "logsumexp",
    "mean",
    "mse",
    "pick",
    "relu",
    "reshape",
    "scalar_mul",
    "set_dtype",
    "sgd_step",
    "sum",
    "upsample2x",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain where an operation is defined."""


_DTYPES = {"32": np.float32, "64": np.float64}
_dtype = _DTYPES[os.environ.get("UFL_PRECISION", "32")]


def set_dtype(dtype) -> None:
    """Set the floating type used for new tensors (float32 or float64)."""
    global _dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _dtype = dtype


def get_dtype():
    return _dtype


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, like=self))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return NotImplemented

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __sub__(self, other):
        return add(self, scalar_mul(_as_tensor(other, like=self), -1.0))


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=like.data.dtype if like is not None else _dtype)
    if like is not None and arr.shape != like.shape:
        arr = np.broadcast_to(arr, like.shape).copy()
    return Tensor(arr)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations run inside the ``with`` block are
    recorded when at least one operand requires a gradient.
    """

    records: list[_Record] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def ops(self) -> list[str]:
        return [r.op for r in self.records]


_active: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("ufl_tape", default=None)


def _record(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, rule) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    tape = _active.get()
    if needs and tape is not None:
        tape.records.append(_Record(inputs, out, rule, op))
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> list[Tensor]:
    """Back-propagate from scalar ``loss`` through ``tape`` (default: active tape).

    Gradients accumulate into ``.grad`` of every tensor reached.  Returns the
    leaves (tensors that require a gradient but were not produced on the tape)
    that received a gradient, in first-use order.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else _active.get()
    if tape is None:
        raise RuntimeError("no tape recorded; run the forward pass inside `with Tape():`")
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced:
        raise RuntimeError("loss is not connected to the tape")

    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.rule(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.array(gi, dtype=inp.data.dtype, copy=True)
            else:
                inp.grad += gi

    leaves, seen = [], set()
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.requires_grad and id(inp) not in produced and id(inp) not in seen:
                seen.add(id(inp))
                if inp.grad is not None:
                    leaves.append(inp)
    return leaves


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise --------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _record("add", (a, b), a.data + b.data, lambda g: (g, g))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scalar_mul", (a,), a.data * c, lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0).astype(x.data.dtype), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _record("exp", (x,), y, lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        idx = tuple(int(i) for i in np.argwhere(x.data <= 0)[0])
        raise DomainError(f"log of non-positive value at index {idx}")
    return _record("log", (x,), np.log(x.data), lambda g: (g / x.data,))


# -- reductions ---------------------------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    y = np.sum(x.data, axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", (x,), np.asarray(y), rule)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    y = np.mean(x.data, axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _record("mean", (x,), np.asarray(y), rule)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along ``axis`` with the row maximum subtracted first."""
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = np.sum(e, axis=axis, keepdims=True)
    y = (np.log(s) + m).squeeze(axis)
    soft = e / s
    return _record("logsumexp", (x,), y, lambda g: (np.expand_dims(g, axis) * soft,))


def pick(x: Tensor, index) -> Tensor:
    """Select ``x[r, index[r]]`` from every row ``r`` of a 2-D tensor.

    ``index`` has shape (N,) for one entry per row or (N, k) for k entries.
    """
    index = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or index.ndim not in (1, 2) or index.shape[0] != x.shape[0]:
        raise ShapeError(f"pick: need 2-D input and one index row per input row, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0]) if index.ndim == 1 else np.arange(x.shape[0])[:, None]
    y = x.data[rows, index]

    def rule(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (np.broadcast_to(rows, index.shape), index), g)
        return (out,)

    return _record("pick", (x,), y, rule)


def mse(x: Tensor, y: Tensor) -> Tensor:
    _check_same("mse", x, y)
    diff = x.data - y.data
    n = diff.size
    return _record(
        "mse", (x, y), np.asarray(np.mean(diff * diff)),
        lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n),
    )


# -- shape --------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    y = x.data.reshape(shape)
    return _record("reshape", (x,), y, lambda g: (g.reshape(x.shape),))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an (N, C, H, W) tensor."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x: expected (N, C, H, W), got {x.shape}")
    y = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def rule(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record("upsample2x", (x,), y, rule)


# -- sphere -------------------------------------------------------------------


def l2_normalize(v: Tensor, axis: int = -1) -> Tensor:
    """Scale every slice along ``axis`` to unit Euclidean norm.

    The backward rule projects the incoming gradient onto the tangent space
    of the sphere at the output point.  A zero-norm slice raises
    :class:`DomainError`; no epsilon is added.
    """
    norm = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    if np.any(norm == 0):
        bad = np.argwhere(np.squeeze(norm, axis=axis) == 0)
        where = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise DomainError(f"l2_normalize: zero norm at index {where}")
    y = v.data / norm

    def rule(g):
        radial = np.sum(g * y, axis=axis, keepdims=True)
        return ((g - y * radial) / norm,)

    return _record("l2_normalize", (v,), y, rule)


# -- dense layers -------------------------------------------------------------


def linear(W: Tensor, b: Tensor | None, x: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for ``x`` of shape (in,) or (N, in)."""
    if W.data.ndim != 2 or x.data.ndim not in (1, 2) or x.shape[-1] != W.shape[1]:
        raise ShapeError(f"linear: weight {W.shape} incompatible with input {x.shape}")
    if b is not None and b.shape != (W.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with weight {W.shape}")
    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data

    def rule(g):
        g2 = g.reshape(-1, W.shape[0])
        x2 = x.data.reshape(-1, W.shape[1])
        gW = g2.T @ x2 if W.requires_grad else None
        gx = (g @ W.data) if x.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gW, gb, gx)

    inputs = (W, b if b is not None else Tensor(np.zeros(W.shape[0], W.data.dtype)), x)
    return _record("linear", inputs, y, rule)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (C, kh, kw, N, Ho, Wo) strided view."""
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(c, kh, kw, n, ho, wo),
        strides=(sc, sh, sw, sn, sh * stride, sw * stride), writeable=False,
    )


def conv2d(K: Tensor, x: Tensor, stride: int = 1, padding: int = 0, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with kernel ``K`` (O, C, kh, kw)."""
    if x.data.ndim != 4 or K.data.ndim != 4 or x.shape[1] != K.shape[1]:
        raise ShapeError(f"conv2d: kernel {K.shape} incompatible with input {x.shape}")
    if bias is not None and bias.shape != (K.shape[0],):
        raise ShapeError(f"conv2d: bias {bias.shape} incompatible with kernel {K.shape}")
    o, c, kh, kw = K.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < kh or xp.shape[3] < kw:
        raise ShapeError(f"conv2d: kernel {K.shape} larger than padded input {xp.shape}")
    cols = _im2col(np.ascontiguousarray(xp), kh, kw, stride)
    n, ho, wo = cols.shape[3:]
    flat = cols.reshape(c * kh * kw, n * ho * wo)
    kmat = K.data.reshape(o, -1)
    y = kmat @ flat
    if bias is not None:
        y = y + bias.data[:, None]
    y = y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def rule(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gK = (g2 @ flat.T).reshape(K.shape) if K.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad and stride == 1 and o < c:
            # full correlation of g with the flipped kernel touches o instead of c channels
            gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            gflat = _im2col(np.ascontiguousarray(gp), kh, kw, 1).reshape(o * kh * kw, -1)
            kflip = K.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
            gxp = (kflip @ gflat).reshape(c, n, xp.shape[2], xp.shape[3]).transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        elif x.requires_grad:
            gcols = (kmat.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
            gxp = gxp.transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding:padding + x.shape[2], padding:padding + x.shape[3]] if padding else gxp
        return (gK, gb, gx)

    inputs = (K, bias if bias is not None else Tensor(np.zeros(o, K.data.dtype)), x)
    return _record("conv2d", inputs, np.ascontiguousarray(y), rule)


# -- optimisation -------------------------------------------------------------


def sgd_step(params: Iterable[Tensor], grads: Iterable[np.ndarray | None] | None = None, lr: float = 0.03) -> None:
    """In-place update ``p <- p - lr * g``.

    ``grads`` defaults to each parameter's ``.grad``; a missing gradient
    leaves the parameter untouched.  Non-finite gradients raise before any
    parameter is modified.
    """
    params = list(params)
    grads = [p.grad for p in params] if grads is None else list(grads)
    if len(grads) != len(params):
        raise ValueError(f"sgd_step: {len(params)} params but {len(grads)} grads")
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if np.shape(g) != p.shape:
            raise ShapeError(f"sgd_step: grad {np.shape(g)} does not match param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"sgd_step: non-finite gradient for parameter {p.name or k}")
    if lr == 0:
        return
    for p, g in zip(params, grads):
        if g is not None:
            p.data -= lr * np.asarray(g, dtype=p.data.dtype)
