"""Dense float64 tensors with a reverse-mode gradient tape (numpy backend).

Operations record themselves on the active :class:`Tape` whenever at least
one input requires gradients. Outside a tape context nothing is recorded,
which is how inference runs.

    params = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = sum_(matmul(x, params))
    tape.backward(loss)
    params.grad
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateVectorError, DimensionError, EmptyLossError, NumericError

COSINE_EPS = 1e-12
FD_STEP = 1e-5

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Row-major float64 array plus an optional gradient and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    tag: str
    inputs: tuple
    out: Tensor
    backward: Callable


class Tape:
    """Append-only record of differentiable operations.

    Node handles are insertion indices, so every node's inputs that were
    themselves produced on this tape carry smaller handles.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def record(self, tag: str, inputs: tuple, out: Tensor, backward: Callable) -> int:
        self.nodes.append(Node(tag, inputs, out, backward))
        return len(self.nodes) - 1

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        if loss.tape_id is None:
            raise NumericError("loss was not produced on a tape (no input requires grad?)")
        loss.grad = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=np.float64)
        for node in reversed(self.nodes[: loss.tape_id + 1]):
            g = node.out.grad
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                inp.grad = gi if inp.grad is None else inp.grad + gi


def _result(data, inputs: tuple, backward: Callable, tag: str) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        out.tape_id = tape.record(tag, inputs, out, backward)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    c = math.sqrt(2.0 / math.pi)
    xd = x.data
    t = np.tanh(c * (xd + 0.044715 * xd ** 3))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        dt = (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * dt),)

    return _result(out, (x,), backward, "gelu")


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------- reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(x.data.sum(axis=axis, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum_(x, axis, keepdims), 1.0 / float(n))


# ---------------------------------------------------------------- normalisation


def _check_finite(x: np.ndarray, what: str) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{what}: NaN in input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "softmax")
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return _result(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply elementwise gain and bias."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * rstd
    gd = gain.data

    def backward(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


# ---------------------------------------------------------------- indexing


def take(x: Tensor, index) -> Tensor:
    """Gather rows along axis 0; the backward pass scatter-adds."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise DimensionError(f"row index out of range [0, {n})")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        np.add.at(gx, index, g)
        return (gx,)

    return _result(x.data[index], (x,), backward, "take")


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"token id out of range [0, {table.shape[0]})")
    return take(table, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# ---------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean token NLL over positions where ``mask`` is true.

    ``logits`` is ``[..., V]``; ``targets`` and ``mask`` match its leading shape.
    """
    v = logits.shape[-1]
    z = logits.data.reshape(-1, v)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if t.shape[0] != z.shape[0] or m.shape[0] != z.shape[0]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {np.shape(targets)}")
    n = int(m.sum())
    if n == 0:
        raise EmptyLossError("cross_entropy: every position is masked out")
    if (t[m] < 0).any() or (t[m] >= v).any():
        raise DimensionError(f"cross_entropy: target outside [0, {v})")
    _check_finite(z, "cross_entropy")
    rows = np.nonzero(m)[0]
    zr = z[rows]
    zr = zr - zr.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zr).sum(axis=1))
    nll = lse - zr[np.arange(n), t[rows]]
    shape = logits.shape

    def backward(g):
        p = np.exp(zr - lse[:, None])
        p[np.arange(n), t[rows]] -= 1.0
        gz = np.zeros((z.shape[0], v))
        gz[rows] = p * (float(g) / n)
        return (gz.reshape(shape),)

    return _result(np.array(nll.mean()), (logits,), backward, "cross_entropy")


def cosine_sim(u: Tensor, v: Tensor) -> Tensor:
    """Cosine similarity of two vectors; zero-norm input is an error."""
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 1:
        raise DimensionError(f"cosine_sim expects equal-length vectors: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u.data), np.linalg.norm(v.data)
    if nu <= COSINE_EPS or nv <= COSINE_EPS:
        raise DegenerateVectorError("cosine_sim: zero-norm vector")
    return reshape(cosine_rows(reshape(u, (1, -1)), reshape(v, (1, -1))), ())


def cosine_rows(a: Tensor, b: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Row-wise cosine similarity of two ``[N, D]`` matrices.

    Rows whose norm product is at most ``eps`` get similarity 0 and no gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_rows shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    na = np.linalg.norm(ad, axis=-1)
    nb = np.linalg.norm(bd, axis=-1)
    denom = na * nb
    ok = denom > eps
    safe = np.where(ok, denom, 1.0)
    dot = (ad * bd).sum(axis=-1)
    s = np.where(ok, dot / safe, 0.0)

    def backward(g):
        gs = np.where(ok, g, 0.0)[..., None]
        na_s = np.where(ok, na, 1.0)[..., None]
        nb_s = np.where(ok, nb, 1.0)[..., None]
        ga = gs * (bd / (na_s * nb_s) - s[..., None] * ad / (na_s * na_s))
        gb = gs * (ad / (na_s * nb_s) - s[..., None] * bd / (nb_s * nb_s))
        return ga, gb

    return _result(s, (a, b), backward, "cosine_rows")


# ---------------------------------------------------------------- finite differences


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def numerical_grad(f: Callable[[], float], x: np.ndarray, index, h: float = FD_STEP) -> float:
    """Central difference of scalar ``f()`` w.r.t. ``x[index]`` (``x`` perturbed in place)."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2.0 * h)
