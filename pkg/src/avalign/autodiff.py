"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays. Every differentiable operation returns a new
:class:`Tensor` that remembers its parents and a closure mapping the upstream
gradient to one gradient per parent. :func:`backward` walks the graph in
reverse topological order.

Broadcasting is deliberately narrow: binary ops accept equal shapes, or a 1-D
right operand whose length matches the last axis of the left operand (a bias
row added to every row). Anything else raises :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an op."""


def set_default_dtype(dtype) -> None:
    """Select float64 (gradient tests) or float32 (training) globally."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype():
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference)."""
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    """A node in the computation graph.

    Leaves created directly by the user are constants unless
    ``requires_grad`` is set. Op outputs require grad whenever any parent does.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = "leaf"):
        if isinstance(data, np.ndarray) and data.dtype == _DTYPE:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op})"

    __array_priority__ = 100

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class Parameter(Tensor):
    """Trainable leaf carrying a dotted name such as ``"av_lstm.W"``."""

    __slots__ = ("name", "trainable")

    def __init__(self, name: str, data, trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name
        self.trainable = trainable

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not _GRAD_ENABLED or not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, True, tuple(parents), backward, op)


# ---------------------------------------------------------------------------
# graph traversal


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Backpropagate from a scalar ``loss``.

    Leaf gradients are *accumulated* into ``leaf.grad``; calling twice
    without :func:`zero_grad` doubles them. Returns ``{name: grad array}`` for
    every :class:`Parameter` reached.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    out = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            if isinstance(node, Parameter):
                out[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return out


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise


def _binary_shapes(a: Tensor, b: Tensor, opname: str) -> bool:
    """Return True when ``b`` is a bias row broadcast over ``a``."""
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible")


def _reduce_bias(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _binary_shapes(a, b, "add")

    def bw(g):
        return g, (_reduce_bias(g) if bias else g)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _binary_shapes(a, b, "sub")

    def bw(g):
        return g, -(_reduce_bias(g) if bias else g)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    bias = _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        gb = g * ad
        return g * bd, (_reduce_bias(gb) if bias else gb)

    return _make(ad * bd, (a, b), bw, "mul")


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return _make(x.data * s, (x,), lambda g: (g * s,), "scale")


def div(x, s: float) -> Tensor:
    """Division by a non-zero constant (exact where ``scale(x, 1/s)`` rounds)."""
    x = as_tensor(x)
    s = float(s)
    if s == 0.0:
        raise DomainError("division by zero")
    return _make(x.data / s, (x,), lambda g: (g / s,), "div")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so no overflow
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid_np(x.data)
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return _make(x.data * pos, (x,), lambda g: (g * pos,), "relu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is 1 strictly inside, 0 elsewhere."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """``a @ b`` for a 2-D or 3-D ``a`` and a 2-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2, 3) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def sum(x) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    return scale(sum(x), 1.0 / n)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-stabilised softmax. ``mask`` (bool, same shape) marks valid slots;
    masked slots score minus infinity and receive zero probability."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            d1 != d2 for i, (d1, d2) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in ts], axis=ax), ts, bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: unequal shapes {shapes}")

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, bw, "stack")


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in parts)


def index(x, key) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    basic = _is_basic(key)

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        if basic:
            out[key] = g
        else:
            np.add.at(out, key, g)
        return (out,)

    return _make(x.data[key], (x,), bw, "index")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def pick(x, idx: np.ndarray) -> Tensor:
    """Gather ``x[..., idx]`` along the last axis, one index per leading row."""
    x = as_tensor(x)
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise ShapeError(f"pick: index shape {idx.shape} vs {x.shape}")
    shape = x.shape
    expanded = idx[..., None]

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(out, expanded, g[..., None], axis=-1)
        return (out,)

    return _make(np.take_along_axis(x.data, expanded, axis=-1)[..., 0], (x,), bw, "pick")


def elementwise(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch by name; handy for table-driven tests."""
    table = {
        "add": add,
        "mul": mul,
        "tanh": tanh,
        "sigmoid": sigmoid,
        "log": log,
        "clip": clip,
        "scale": scale,
        "div": div,
        "relu": relu,
        "exp": exp,
        "sub": sub,
    }
    try:
        fn = table[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args, **kwargs)
