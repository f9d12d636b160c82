"""Dense tensors with reverse-mode automatic differentiation.

Operations executed while any input requires a gradient are recorded on a
tape (the active :class:`Graph`). ``backward(loss)`` replays the tape in
reverse, accumulates gradients into every participating tensor, and resets
the tape. Recording is single-threaded per training session; tensors that
never touch the tape are plain immutable arrays and safe to share.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.dtype("float32")

Scalar = Union[int, float]


class ShapeError(ValueError):
    """Operation inputs do not satisfy the op's shape rule."""


class Tensor:
    """N-dimensional float array, optionally participating in the grad tape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = DEFAULT_DTYPE
        self.data: np.ndarray = np.asarray(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic (definitions below, attached at module end)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other: Scalar):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: Scalar):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Node:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward_fn")

    def __init__(self, op: str, inputs: tuple, output: "Tensor",
                 backward_fn: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Graph:
    """Tape of recorded operations in execution order.

    Execution order is a topological order by construction: an op can only
    consume tensors that already exist, so every node's inputs precede it.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        self.nodes.clear()


_graph = Graph()
_recording = True


def active_graph() -> Graph:
    return _graph


@contextlib.contextmanager
def no_grad():
    """Suppress tape recording (inference mode)."""
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


def _record(op: str, out_data: np.ndarray, inputs: tuple,
            backward_fn: Callable[[np.ndarray], tuple]) -> Tensor:
    requires = _recording and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if requires:
        _graph.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate gradients of every recorded tensor reachable from ``loss``.

    The tape is consumed: after this call the active graph is empty.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not _graph.nodes:
        raise RuntimeError("backward: no operations recorded on the active graph")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(_graph.nodes):
            g = node.output.grad
            if g is None:
                continue
            contribs = node.backward_fn(g)
            for t, c in zip(node.inputs, contribs):
                if c is None or not t.requires_grad:
                    continue
                t.grad = c if t.grad is None else t.grad + c
    finally:
        _graph.reset()


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), requires_grad=False, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return _record("mul", out, (a, b), bw)


def power(a: Tensor, exponent: Scalar) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    out = a.data ** p
    ad = a.data

    def bw(g):
        return (g * p * ad ** (p - 1.0),)

    return _record("power", out, (a,), bw)


def log(a: Tensor) -> Tensor:
    """Natural logarithm. Inputs must be positive (clamp first if unsure)."""
    a = _as_tensor(a)
    out = np.log(a.data)
    ad = a.data

    def bw(g):
        return (g / ad,)

    return _record("log", out, (a,), bw)


def clamp(a: Tensor, lo: Scalar, hi: Scalar) -> Tensor:
    a = _as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bw(g):
        return (g * inside,)

    return _record("clamp", out, (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _record("relu", out, (a,), bw)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # evaluate with the sign split to avoid overflow in exp
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def bw(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", out, (a,), bw)


def hardswish(a: Tensor) -> Tensor:
    """x * relu6(x + 3) / 6, the MobileNetV3 activation."""
    a = _as_tensor(a)
    x = a.data
    out = x * np.clip(x + 3.0, 0.0, 6.0) / 6.0
    out = out.astype(x.dtype, copy=False)
    # piecewise derivative: 0 below -3, 1 above 3, (2x+3)/6 in between
    deriv = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
    deriv = deriv.astype(x.dtype, copy=False)

    def bw(g):
        return (g * deriv,)

    return _record("hardswish", out, (a,), bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)
    in_shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, in_shape).astype(a.dtype, copy=False),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        g_exp = np.expand_dims(g, tuple(ax % len(in_shape) for ax in axes))
        return (np.broadcast_to(g_exp, in_shape).astype(a.dtype, copy=False),)

    return _record("sum", out, (a,), bw)


def tmean(a: Tensor, axis=None) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)])
    return mul(tsum(a, axis), 1.0 / float(count))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    in_shape = a.shape

    def bw(g):
        return (g.reshape(in_shape),)

    return _record("reshape", out, (a,), bw)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries of ``a`` along ``axis`` starting at ``start``."""
    a = _as_tensor(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = a.data[idx].copy()
    in_shape = a.shape

    def bw(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _record("narrow", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat: need at least one input")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                i != axis % t.ndim and t.shape[i] != ref[i] for i in range(t.ndim)):
            raise ShapeError(
                f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for k in range(len(tensors)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[k], bounds[k + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _record("concat", out, tensors, bw)
