"""Dense tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: it covers exactly the operations the
attention, fusion and flow-matching code needs. Storage is a C-ordered numpy
array, so flat row-major indexing is inherited from numpy.

Usage::

    w = Tensor(np.random.randn(4, 3), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    grads = backward(tape, loss)
    grads[w]  # ndarray shaped like w
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("kind", "inputs", "output", "backward")

    def __init__(self, kind, inputs, output, backward):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered log of differentiable operations, built during the forward pass.

    A tape is bound to the thread that created it. Use it as a context
    manager; operations executed inside the block whose inputs require
    gradients are appended in execution order, which is already a valid
    topological order.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._thread = threading.get_ident()

    def __enter__(self) -> "Tape":
        self._check_thread()
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def _check_thread(self):
        if threading.get_ident() != self._thread:
            raise ContractError("a Tape is confined to the thread that created it")

    def tracks(self, t: "Tensor") -> bool:
        return t.requires_grad or t._tape is self

    def record(self, kind: str, inputs: tuple, output: "Tensor", backward: Callable):
        self._check_thread()
        output._tape = self
        output._index = len(self.records)
        self.records.append(_Record(kind, inputs, output, backward))


class Tensor:
    """Dense array that can participate in an active :class:`Tape`."""

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "name", "_tape", "_index")

    def __init__(self, data, dtype=None, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = requires_grad
        self.name = name
        self._tape = None
        self._index = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def flat(self) -> np.ndarray:
        """Row-major flat view of the storage."""
        return self.data.reshape(-1)

    @property
    def grad_id(self) -> int | None:
        return self._index

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # -- operators -----------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x, dtype=dtype)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _op(kind: str, data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape.record(kind, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _op("add", a.data + b.data, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return _op("sub", a.data - b.data, (a, b),
               lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return _op("mul", ad * bd, (a, b),
               lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _op("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _op("neg", -a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _op("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = (x * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return ((g * (cdf + x * pdf)).astype(x.dtype, copy=False),)

    return _op("gelu", out, (a,), backward)


# -- linear algebra ----------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _op("matmul", ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalisation -----------------------------------------------------
def softmax_kernel(x: np.ndarray, axis: int = -1) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError("softmax received non-finite input")
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with row-max subtraction."""
    y = softmax_kernel(a.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _op("softmax", y, (a,), backward)


def softmax_rows(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {a.shape}")
    return softmax(a, axis=-1)


def layer_norm_kernel(x: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis (population variance), then scale and shift."""
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    q = a.shape[-1]
    for p in (gamma, beta):
        if p is not None and p.shape != (q,):
            raise DimensionError(f"layer_norm parameter shape {p.shape} does not match width {q}")
    xhat, inv = layer_norm_kernel(a.data, eps)
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    inputs = tuple(t for t in (a, gamma, beta) if t is not None)

    def backward(g):
        dxhat = g * gamma.data if gamma is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append((g * xhat).reshape(-1, q).sum(axis=0))
        if beta is not None:
            grads.append(g.reshape(-1, q).sum(axis=0))
        return tuple(grads)

    return _op("layer_norm", out.astype(a.dtype, copy=False), inputs, backward)


# -- reductions and shape ops -----------------------------------------
def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _op("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    src = a.shape
    return _op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _op("swapaxes", np.ascontiguousarray(np.swapaxes(a.data, i, j)), (a,),
               lambda g: (np.swapaxes(g, i, j),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _op("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None))) or i is Ellipsis for i in items)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _op("getitem", np.array(a.data[index], order="C"), (a,), backward)


# -- differentiation ---------------------------------------------------
class GradMap:
    """Gradients keyed by leaf tensor identity.

    Looking up a leaf that had no path to the loss yields exact zeros.
    """

    def __init__(self, grads: dict, leaves: dict):
        self._grads = grads
        self._leaves = leaves

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._leaves.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._leaves.get(id(t)) is t

    def __len__(self) -> int:
        return len(self._leaves)

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())


def backward(tape: Tape, loss: Tensor) -> GradMap:
    """Reverse sweep over ``tape`` seeded with d(loss)/d(loss) = 1."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape:
        raise ContractError("loss was not produced on this tape")
    tape._check_thread()
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not tape.tracks(inp):
                continue
            key = id(inp)
            if inp._tape is not tape:
                leaves[key] = inp
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    return GradMap(grads, leaves)


def grad(fn: Callable[[], Tensor], params: Iterable[Tensor]) -> tuple[float, list[np.ndarray]]:
    """Run ``fn`` under a fresh tape and return ``(loss, [d loss / d p])``.

    ``params`` are tracked for the duration of the call even when they were
    created without ``requires_grad``.
    """
    params = list(params)
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
    try:
        with Tape() as tape:
            loss = fn()
        grads = backward(tape, loss)
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f
    return loss.item(), [grads[p] for p in params]
