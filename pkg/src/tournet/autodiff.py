"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Ops record an acyclic graph of ``Tensor`` nodes as they execute; calling
``backward()`` on a scalar loss runs one reverse sweep and accumulates
gradients on every reachable leaf that requires them. The engine is
deliberately small: dense row-major arrays only, float32 by default
(float64 selectable for tight gradient checks), no views, no in-place
mutation of recorded tensors.

Masking convention: "minus infinity" is represented by the most negative
finite value of the dtype (see ``neg_inf``). ``exp`` underflows it to an
exact zero, so masked softmax entries come out exactly 0 without NaNs.
"""

from __future__ import annotations

import contextlib
from typing import Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "BatchNormState",
    "neg_inf",
    "no_grad",
    "set_check_finite",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "pow_scalar",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "transpose",
    "relu",
    "leaky_relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "log_softmax",
    "masked_fill",
    "gather",
    "batch_norm",
]

_GRAD_ENABLED = True
_CHECK_FINITE = False


def neg_inf(dtype=np.float32) -> float:
    """Finite stand-in for -inf: exp() underflows it to exactly 0."""
    return float(np.finfo(np.dtype(dtype)).min)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference fast path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_check_finite(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf (slow, for tests)."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(flag)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def backward(self) -> None:
        """Reverse sweep from a scalar; accumulates into leaf ``.grad``."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: persist the accumulated gradient
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


class Parameter(Tensor):
    """Learnable leaf tensor with a stable name path."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, dtype={self.data.dtype})"


def _as_tensor(x, like: np.dtype | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like and arr.dtype.kind in "fiu":
        arr = arr.astype(like)
    return Tensor(arr)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a.data.dtype)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a.data.dtype)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a.data.dtype)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a.data.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(
            f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
        )
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g):
        ga = _unbroadcast(g @ bd.swapaxes(-1, -2), ad.shape)
        gb = _unbroadcast(ad.swapaxes(-1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), vjp)


def pow_scalar(a, p: float) -> Tensor:
    """Elementwise power with a constant exponent (base must keep x**(p-1) finite)."""
    a = _as_tensor(a)
    out = a.data**p
    ad = a.data

    def vjp(g):
        return (g * p * ad ** (p - 1),)

    return _make(out, (a,), vjp)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def reduce_sum(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, (a,), vjp)


def reduce_mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axes(axis, a.data.ndim)
    count = int(np.prod([a.data.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make(out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    orig = a.data.shape
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(orig),)

    return _make(out, (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _make(out, (a,), vjp)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0)
    pos = a.data > 0

    def vjp(g):
        return (g * pos,)

    return _make(out, (a,), vjp)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, a.data.dtype.type(slope) * a.data)

    def vjp(g):
        one = g.dtype.type(1.0)
        return (g * np.where(pos, one, g.dtype.type(slope)),)

    return _make(out, (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # exp of -|x| never overflows; both branches share it
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _make(out, (a,), vjp)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _make(out, (a,), vjp)


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = np.log(a.data)
    ad = a.data

    def vjp(g):
        return (g / ad,)

    return _make(out, (a,), vjp)


def _check_not_fully_masked(xmax: np.ndarray, dtype) -> None:
    if np.any(xmax <= neg_inf(dtype)):
        raise ValueError("softmax over a fully masked axis")


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.data.ndim
    xmax = a.data.max(axis=ax, keepdims=True)
    _check_not_fully_masked(xmax, a.data.dtype)
    e = np.exp(a.data - xmax)
    out = e / e.sum(axis=ax, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.data.ndim
    xmax = a.data.max(axis=ax, keepdims=True)
    _check_not_fully_masked(xmax, a.data.dtype)
    shifted = a.data - xmax
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _make(out, (a,), vjp)


def masked_fill(a, mask, fill: float) -> Tensor:
    """Replace masked positions with ``fill``; gradient there is zero."""
    a = _as_tensor(a)
    m = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    out = np.where(m, a.data.dtype.type(fill), a.data)

    def vjp(g):
        return (np.where(m, 0, g),)

    return _make(out, (a,), vjp)


def gather(a, index, axis: int) -> Tensor:
    """take_along_axis with a scatter-add backward."""
    a = _as_tensor(a)
    idx = np.asarray(index)
    if idx.ndim != a.data.ndim:
        raise ValueError("gather index must have the same rank as the input")
    ax = axis % a.data.ndim
    out = np.take_along_axis(a.data, idx, axis=ax)
    shape = a.data.shape

    def vjp(g):
        ga = np.zeros(shape, dtype=g.dtype)
        mesh = list(np.indices(idx.shape, sparse=True))
        mesh[ax] = idx
        np.add.at(ga, tuple(mesh), g)
        return (ga,)

    return _make(out, (a,), vjp)


class BatchNormState:
    """Per-feature scale/shift parameters plus running statistics.

    The normalized axis is the last one; train mode normalizes over every
    other axis of the input and updates the running stats with the given
    momentum, eval mode applies the stored stats (stateless).
    """

    def __init__(self, features: int, name: str, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.scale = Parameter(np.ones(features, dtype=dtype), name + ".scale")
        self.shift = Parameter(np.zeros(features, dtype=dtype), name + ".shift")
        self.running_mean = np.zeros(features, dtype=dtype)
        self.running_var = np.ones(features, dtype=dtype)
        self.eps = eps
        self.momentum = momentum

    @property
    def features(self) -> int:
        return self.scale.data.shape[0]

    def copy_from(self, other: "BatchNormState") -> None:
        self.scale.data = other.scale.data.copy()
        self.shift.data = other.shift.data.copy()
        self.running_mean = other.running_mean.copy()
        self.running_var = other.running_var.copy()


def batch_norm(x, state: BatchNormState, training: bool) -> Tensor:
    x = _as_tensor(x)
    if x.data.shape[-1] != state.features:
        raise ValueError(
            f"batch_norm feature axis {x.data.shape[-1]} != state features {state.features}"
        )
    axes = tuple(range(x.data.ndim - 1))
    if training:
        mu = reduce_mean(x, axis=axes, keepdims=True)
        xc = sub(x, mu)
        var = reduce_mean(mul(xc, xc), axis=axes, keepdims=True)
        inv = pow_scalar(add(var, x.data.dtype.type(state.eps)), -0.5)
        xhat = mul(xc, inv)
        # running-stat update stays outside the graph
        n_red = max(1, x.data.size // x.data.shape[-1])
        bm = x.data.mean(axis=axes)
        bv = x.data.var(axis=axes)
        bv_run = bv * (n_red / (n_red - 1)) if n_red > 1 else bv
        m = state.momentum
        dt = state.running_mean.dtype
        state.running_mean = ((1 - m) * state.running_mean + m * bm).astype(dt)
        state.running_var = ((1 - m) * state.running_var + m * bv_run).astype(dt)
    else:
        inv_np = 1.0 / np.sqrt(state.running_var.astype(np.float64) + state.eps)
        xhat = mul(sub(x, Tensor(state.running_mean)),
                   Tensor(inv_np.astype(x.data.dtype)))
    return add(mul(xhat, state.scale), state.shift)
