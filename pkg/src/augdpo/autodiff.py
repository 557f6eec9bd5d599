"""Reverse-mode automatic differentiation over dense float64 arrays.

Deliberately small: the op set below is exactly what the policy network and
the preference losses need, every op has an exact shape contract (no implicit
broadcasting between tensors), and everything is float64 so that numerical
tolerances in the loss-identity and finite-difference tests are meaningful.

Each thread records onto its own tape, so read-only data-parallel evaluation
(one graph per thread) is safe; a single training step builds and consumes one
graph on one thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf, expit

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "concat_rows",
    "take_rows",
    "gather_index",
    "softmax",
    "log_softmax",
    "sigmoid",
    "softplus",
    "log_sigmoid",
    "tanh",
    "gelu",
    "layer_norm",
    "reduce_sum",
    "reduce_mean",
    "OPS",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(int(d) for d in s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: non-conforming shapes {pretty}")


class _State(threading.local):
    def __init__(self):
        self.tape: list[Tensor] = []
        self.grad_enabled = True


_STATE = _State()


class no_grad:
    """Context manager: ops executed inside produce constants (not recorded)."""

    def __enter__(self):
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


class Tensor:
    """Dense float64 array plus an optional gradient of the same shape.

    Tensors are immutable by convention after creation: ops never write to
    operand data, only to `grad` during backward.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._bwd: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small arithmetic sugar; everything routes through the checked ops.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, delta: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += delta


def _record(out: Tensor, parents: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._bwd = bwd
        _STATE.tape.append(out)
    return out


def clear_graph() -> None:
    """Drop every recorded node on this thread's tape."""
    for node in _STATE.tape:
        node._parents = ()
        node._bwd = None
    _STATE.tape.clear()


def graph_size() -> int:
    return len(_STATE.tape)


def backward(loss: Tensor) -> None:
    """Backpropagate from a recorded scalar; populates `.grad` on every
    requires_grad tensor reachable from `loss`, then clears the graph.

    Tape order is creation order, which is a topological order by
    construction, so a single reverse sweep visits each node exactly once and
    fan-out gradients accumulate additively.
    """
    if loss.data.shape != ():
        raise ShapeError("backward", loss.data.shape)
    if not _STATE.tape:
        raise RuntimeError("backward: empty graph (no recorded operations)")
    if loss._bwd is None:
        raise RuntimeError("backward: loss is not a recorded node")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(_STATE.tape):
        if node.grad is not None and node._bwd is not None:
            node._bwd(node.grad)
    clear_graph()


# ---------------------------------------------------------------------------
# Ops.  Shape contracts are strict; broadcasting inside an op implementation
# (e.g. a per-row mean in layer_norm) is an implementation detail, not part of
# the contract.
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("add", a.shape, b.shape)
    out = Tensor(a.data + b.data)

    def bwd(dy):
        _accum(a, dy)
        _accum(b, dy)

    return _record(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("sub", a.shape, b.shape)
    out = Tensor(a.data - b.data)

    def bwd(dy):
        _accum(a, dy)
        _accum(b, -dy)

    return _record(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)
    out = Tensor(a.data * b.data)

    def bwd(dy):
        _accum(a, dy * b.data)
        _accum(b, dy * a.data)

    return _record(out, (a, b), bwd)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(dy):
        _accum(a, dy * c)

    return _record(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out = Tensor(a.data @ b.data)

    def bwd(dy):
        _accum(a, dy @ b.data.T)
        _accum(b, a.data.T @ dy)

    return _record(out, (a, b), bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    out = Tensor(a.data.T)

    def bwd(dy):
        _accum(a, dy.T)

    return _record(out, (a,), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows: empty input")
    ncols = parts[0].shape[1] if parts[0].data.ndim == 2 else None
    for p in parts:
        if p.data.ndim != 2 or p.shape[1] != ncols:
            raise ShapeError("concat_rows", *(q.shape for q in parts))
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    offsets = np.cumsum([0] + [p.shape[0] for p in parts])

    def bwd(dy):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, dy[lo:hi])

    return _record(out, tuple(parts), bwd)


def take_rows(a, idx) -> Tensor:
    """Row gather: out[i] = a[idx[i]].  Doubles as embedding lookup."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("take_rows", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take_rows: index out of range for {a.shape[0]} rows")
    out = Tensor(a.data[idx])

    def bwd(dy):
        if a.requires_grad:
            delta = np.zeros_like(a.data)
            np.add.at(delta, idx, dy)
            _accum(a, delta)

    return _record(out, (a,), bwd)


def gather_index(a, idx) -> Tensor:
    """Per-row pick: out[i] = a[i, idx[i]]."""
    a = _as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("gather_index", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise IndexError(f"gather_index: index out of range for {a.shape[1]} columns")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])

    def bwd(dy):
        if a.requires_grad:
            delta = np.zeros_like(a.data)
            np.add.at(delta, (rows, idx), dy)
            _accum(a, delta)

    return _record(out, (a,), bwd)


def _check_1d_or_2d(op: str, a: Tensor) -> None:
    if a.data.ndim not in (1, 2):
        raise ShapeError(op, a.shape)


def softmax(a) -> Tensor:
    """Softmax over the last axis (1-D vector or rows of a 2-D matrix)."""
    a = _as_tensor(a)
    _check_1d_or_2d("softmax", a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def bwd(dy):
        dot = (dy * y).sum(axis=-1, keepdims=True)
        _accum(a, y * (dy - dot))

    return _record(out, (a,), bwd)


def log_softmax(a) -> Tensor:
    a = _as_tensor(a)
    _check_1d_or_2d("log_softmax", a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(y)

    def bwd(dy):
        _accum(a, dy - np.exp(y) * dy.sum(axis=-1, keepdims=True))

    return _record(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = expit(a.data)
    out = Tensor(s)

    def bwd(dy):
        _accum(a, dy * s * (1.0 - s))

    return _record(out, (a,), bwd)


def softplus(a) -> Tensor:
    """log(1 + exp(x)), computed as max(x, 0) + log1p(exp(-|x|)) for stability."""
    a = _as_tensor(a)
    x = a.data
    out = Tensor(np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x))))

    def bwd(dy):
        _accum(a, dy * expit(x))

    return _record(out, (a,), bwd)


def log_sigmoid(a) -> Tensor:
    """log sigma(x) = -softplus(-x); the stable kernel under preference losses."""
    a = _as_tensor(a)
    x = a.data
    out = Tensor(-(np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x)))))

    def bwd(dy):
        _accum(a, dy * expit(-x))

    return _record(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    out = Tensor(t)

    def bwd(dy):
        _accum(a, dy * (1.0 - t * t))

    return _record(out, (a,), bwd)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * cdf)

    def bwd(dy):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        _accum(a, dy * (cdf + x * pdf))

    return _record(out, (a,), bwd)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-row normalization of a (T, d) matrix with learned gain/shift (d,)."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def bwd(dy):
        if gamma.requires_grad:
            _accum(gamma, (dy * xhat).sum(axis=0))
        if beta.requires_grad:
            _accum(beta, dy.sum(axis=0))
        if x.requires_grad:
            g = dy * gamma.data
            m1 = g.mean(axis=1, keepdims=True)
            m2 = (g * xhat).mean(axis=1, keepdims=True)
            _accum(x, (g - m1 - xhat * m2) * inv)

    return _record(out, (x, gamma, beta), bwd)


def reduce_sum(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.sum())

    def bwd(dy):
        _accum(a, np.full_like(a.data, float(dy)))

    return _record(out, (a,), bwd)


def reduce_mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean", a.shape)
    out = Tensor(a.data.mean())

    def bwd(dy):
        _accum(a, np.full_like(a.data, float(dy) / n))

    return _record(out, (a,), bwd)


# Registry of every differentiable op, used by the finite-difference sweep.
OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "concat_rows": concat_rows,
    "take_rows": take_rows,
    "embedding": take_rows,
    "gather_index": gather_index,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "log_sigmoid": log_sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "layer_norm": layer_norm,
    "sum": reduce_sum,
    "mean": reduce_mean,
}


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of a scalar-valued
    `f` at `x` and central finite differences with step `h`.

    The numeric side never touches the graph, so this is an independent check
    of every op on the path through `f`.
    """
    was_requiring = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    clear_graph()
    out = f(x)
    if out.data.shape != ():
        raise ShapeError("grad_check", out.data.shape)
    if not np.isfinite(out.data):
        raise FloatingPointError("grad_check: f(x) is not finite")
    if out._bwd is None:
        # f ignores x entirely; the zero gradient is trivially correct.
        clear_graph()
        x.requires_grad = was_requiring
        return 0.0
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(x).data)
            flat[i] = orig - h
            fm = float(f(x).data)
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * h)
    x.requires_grad = was_requiring
    rel = np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
