"""Reverse-mode differentiation over numpy arrays.

Every differentiable op creates a :class:`Tensor` and, when any input
requires a gradient, appends it to the active :class:`Tape`. ``backward``
replays the tape in reverse, so each recorded node is visited exactly once.
Arrays produced by ops are never mutated afterwards.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from ..errors import ContractError, DimensionError, NumericError
from . import kernels

_state = threading.local()


def _st():
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.grad_enabled = True
        _state.tape = Tape()
        _state.mults = 0
    return _state


def default_dtype():
    return _st().dtype


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("only float32 and float64 are supported")
    _st().dtype = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default dtype used for new parameters and constants."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    st = _st()
    old = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = old


def grad_enabled() -> bool:
    return _st().grad_enabled


def multiply_count() -> int:
    """Running count of scalar multiplies issued by matmul-type ops on this thread."""
    return _st().mults


def _count(n: int) -> None:
    _st().mults += int(n)


class Tape:
    """Ordered record of nodes that need a backward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


def get_tape() -> Tape:
    return _st().tape


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False):
        if not isinstance(data, np.ndarray):
            data = np.asarray(data, dtype=default_dtype())
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None

    shape = property(lambda self: self.data.shape)
    ndim = property(lambda self: self.data.ndim)
    dtype = property(lambda self: self.data.dtype)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


class Parameter(Tensor):
    """A named, optionally trainable leaf.

    ``value`` may be ``None`` for audit-only instantiation; only the shape is
    then known and the parameter cannot take part in computation.
    """

    __slots__ = ("name", "trainable", "_shape")

    def __init__(self, value, name="", trainable=True, shape=None):
        if value is None:
            super().__init__(np.empty(0, dtype=default_dtype()), requires_grad=False)
            self.data = None
            self._shape = tuple(shape)
        else:
            value = np.ascontiguousarray(value)
            super().__init__(value, requires_grad=trainable)
            self._shape = value.shape
        self.name = name
        self.trainable = trainable

    shape = property(lambda self: self._shape)

    @property
    def value(self):
        return self.data

    @property
    def gradient(self):
        return self.grad

    @property
    def size(self) -> int:
        return int(np.prod(self._shape, dtype=np.int64))

    @property
    def materialized(self) -> bool:
        return self.data is not None

    def set_value(self, value) -> None:
        value = np.ascontiguousarray(value, dtype=self.data.dtype if self.data is not None else None)
        if value.shape != self._shape:
            raise DimensionError(f"{self.name}: expected shape {self._shape}, got {value.shape}")
        self.data = value

    def set_trainable(self, flag: bool) -> None:
        self.trainable = flag
        self.requires_grad = flag

    def zero_grad(self) -> None:
        if self.data is not None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self._shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=default_dtype()))


def _const_like(x, ref: np.ndarray):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _const_like(b, a.data)
    if isinstance(b, Tensor):
        return _const_like(a, b.data), b
    return as_tensor(a), as_tensor(b)


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _st().grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._backward = backward
        _st().tape.record(out)
    return out


def _acc(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    nlead = g.ndim - len(shape)
    if nlead > 0:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor, grad=None) -> None:
    """Accumulate gradients of ``loss`` into every leaf and reset the tape."""
    tape = get_tape()
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        tape.reset()
        return
    _acc(loss, grad)
    nodes = tape.nodes
    for node in reversed(nodes):
        g = node.grad
        if g is not None and node._backward is not None:
            node._backward(g)
            node.grad = None
        node._backward = None
    tape.reset()


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    out = a.data + b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    out = a.data - b.data

    def bw(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("division by exact zero")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _acc(a, g * out * (1.0 - out))

    return _make(out, (a,), bw)


def silu(a: Tensor) -> Tensor:
    out, sig = kernels.silu_fwd(a.data)

    def bw(g):
        _acc(a, kernels.silu_bwd(np.ascontiguousarray(g), a.data, sig))

    return _make(out, (a,), bw)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data

    def bw(g):
        _acc(a, 2.0 * a.data * g)

    return _make(out, (a,), bw)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise NumericError("sqrt of a negative value")
    out = np.sqrt(a.data)

    def bw(g):
        if np.any(out == 0):
            raise NumericError("sqrt gradient at exact zero")
        _acc(a, g * 0.5 / out)

    return _make(out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        _acc(a, g * out)

    return _make(out, (a,), bw)


def elu_plus_one(a: Tensor) -> Tensor:
    """elu(x) + 1, a strictly positive feature map."""
    x = a.data
    ex = np.exp(np.minimum(x, 0.0))
    out = np.where(x > 0, x + 1.0, ex)

    def bw(g):
        _acc(a, g * np.where(x > 0, 1.0, ex).astype(x.dtype, copy=False))

    return _make(out, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)

    def bw(g):
        _acc(a, g * np.sign(a.data))

    return _make(out, (a,), bw)


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "silu": silu,
    "sigmoid": sigmoid,
    "square": square,
    "sqrt": sqrt,
}
_BINARY = {"add", "sub", "mul", "div"}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch a registered elementwise primitive by name."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _ELEMENTWISE[op](a, b)
    if b is not None:
        raise ContractError(f"{op} is unary")
    return _ELEMENTWISE[op](as_tensor(a))


# ----------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d array")
        out.append(ax % ndim)
    return tuple(out)


def _check_nonempty(a, axes):
    for ax in axes:
        if a.shape[ax] == 0:
            raise DimensionError(f"cannot reduce over empty axis {ax} of shape {a.shape}")


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _acc(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), (a,), bw)


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    _check_nonempty(a, axes)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    out = np.mean(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        _acc(a, np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(out, dtype=a.dtype), (a,), bw)


def reduce_max(a: Tensor, axis: int = -1, keepdims=False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal index."""
    (ax,) = _norm_axis(axis, a.ndim)
    _check_nonempty(a, (ax,))
    idx = np.argmax(a.data, axis=ax)  # argmax returns the first maximum
    out = np.take_along_axis(a.data, np.expand_dims(idx, ax), axis=ax)
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def bw(g):
        gg = g if keepdims else np.expand_dims(g, ax)
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, ax), gg, axis=ax)
        _acc(a, full)

    return _make(out, (a,), bw)


def reduce(op: str, a, axis=None) -> Tensor:
    a = as_tensor(a)
    if op == "sum":
        return reduce_sum(a, axis)
    if op == "mean":
        return reduce_mean(a, axis)
    if op == "max":
        return reduce_max(a, -1 if axis is None else axis)
    raise ContractError(f"unknown reduction {op!r}")


# ----------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} @ {b.shape}") from None
    _count(out.size * a.shape[-1])

    def bw(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x[..., in] @ w[in, out] (+ b), flattened into one BLAS call."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, w.shape[0])
    out = x2 @ w.data
    _count(out.size * w.shape[0])
    if b is not None:
        out += b.data
    out = out.reshape(lead + (w.shape[1],))
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.reshape(-1, w.shape[1])
        if w.requires_grad:
            _acc(w, x2.T @ g2)
        if b is not None and b.requires_grad:
            _acc(b, g2.sum(axis=0))
        if x.requires_grad:
            _acc(x, (g2 @ w.data.T).reshape(x.shape))

    return _make(out, parents, bw)


# ----------------------------------------------------------------------------
# fused row ops


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)[0]
    x = np.moveaxis(a.data, ax, -1)
    shp = x.shape
    y2 = kernels.softmax_fwd(np.ascontiguousarray(x.reshape(-1, shp[-1])))
    out = np.moveaxis(y2.reshape(shp), -1, ax)

    def bw(g):
        gm = np.ascontiguousarray(np.moveaxis(g, ax, -1)).reshape(-1, shp[-1])
        gx = kernels.softmax_bwd(gm, y2).reshape(shp)
        _acc(a, np.moveaxis(gx, -1, ax))

    return _make(out, (a,), bw)


def rms_norm(x: Tensor, gain: Tensor | None, eps: float) -> Tensor:
    """x / sqrt(mean(x^2) + eps) over the last axis, times an optional gain."""
    d = x.shape[-1]
    x2 = np.ascontiguousarray(x.data.reshape(-1, d))
    gd = gain.data if gain is not None else np.ones(d, dtype=x.dtype)
    y, inv = kernels.rms_norm_fwd(x2, gd, eps)
    parents = (x,) if gain is None else (x, gain)

    def bw(g):
        gx, gg = kernels.rms_norm_bwd(np.ascontiguousarray(g.reshape(-1, d)), x2, gd, inv)
        _acc(x, gx.reshape(x.shape))
        if gain is not None:
            _acc(gain, gg)

    return _make(y.reshape(x.shape), parents, bw)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive pairs of the last axis; cos/sin broadcast as [..., T, dh/2]."""
    xd = x.data
    x1 = xd[..., 0::2]
    x2 = xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def bw(g):
        g1 = g[..., 0::2]
        g2 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = -g1 * sin + g2 * cos
        _acc(x, gx)

    return _make(out, (x,), bw)


# ----------------------------------------------------------------------------
# shape ops


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        _acc(a, g.reshape(a.shape))

    return _make(out, (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.transpose(a.data, axes)

    def bw(g):
        _acc(a, np.transpose(g, inv))

    return _make(out, (a,), bw)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        _acc(a, full)

    return _make(np.ascontiguousarray(out), (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = _norm_axis(axis, tensors[0].ndim)[0]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                _acc(t, g[tuple(sl)])

    return _make(out, tensors, bw)


def split(a: Tensor, sections: int, axis: int = -1) -> list[Tensor]:
    ax = _norm_axis(axis, a.ndim)[0]
    n = a.shape[ax]
    if n % sections:
        raise DimensionError(f"cannot split extent {n} into {sections} parts")
    step = n // sections
    outs = []
    for i in range(sections):
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(i * step, (i + 1) * step)
        outs.append(getitem(a, tuple(sl)))
    return outs


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        _acc(table, full)

    return _make(out, (table,), bw)


def dropout(x: Tensor, p: float, rng, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))
