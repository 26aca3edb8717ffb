"""Dense float tensors with reverse-mode differentiation.

Every operation in this module produces a new immutable :class:`Tensor`.  When
an operation runs while recording is enabled and at least one input requires a
gradient, the output remembers its parents and a closure computing the vector
Jacobian product.  :func:`backward` walks that recorded graph (the "tape") in
reverse creation order.

Example
-------
>>> x = Tensor([3.0], requires_grad=True)
>>> y = (x * x).sum()
>>> backward(y, [x])[x].data
array([6.])
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_CLAMP = 1e-7

_counter = itertools.count()
_state = threading.local()


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _default_dtype():
    return getattr(_state, "dtype", np.float64)


@contextmanager
def precision(dtype):
    """Set the float dtype used for new tensors in this thread (float64 default)."""
    prev = _default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class Tensor:
    """Immutable dense array that may take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp", "_id")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=_default_dtype())
        if not _all_finite(arr):
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._vjp = None
        self._id = next(_counter)

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    __hash__ = object.__hash__

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _all_finite(data) -> bool:
    # one reduction pass; a non-finite sum triggers the exact check
    return bool(np.isfinite(np.sum(data))) or bool(np.all(np.isfinite(data)))


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if not _all_finite(data):
        raise NonFiniteError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    data = np.asarray(data)
    data.setflags(write=False)
    out.data = data
    out.name = None
    out._id = next(_counter)
    if _recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out.requires_grad = False
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError(f"div: zero in denominator of shape {b.shape}")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent < 1 and np.any(a.data <= 0) and exponent != int(exponent):
        raise DomainError(f"power: non-positive base with exponent {exponent}")
    out = a.data ** exponent
    return _make(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "power")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative input")
    out = np.sqrt(a.data)
    if np.any(out == 0) and a.requires_grad:
        raise DomainError("sqrt: zero input has no finite derivative")
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported as NonFiniteError below
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError(f"log: non-positive input (min {a.data.min()!r})")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a, slope: float = 0.05) -> Tensor:
    a = as_tensor(a)
    factor = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); entries below the floor receive zero gradient."""
    a = as_tensor(a)
    mask = a.data >= floor
    return _make(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "clamp_min")


def clamp_prob(a, eps: float = PROB_CLAMP) -> Tensor:
    """Clamp probabilities into [eps, 1 - eps] (gradient passes inside the band)."""
    a = as_tensor(a)
    mask = (a.data >= eps) & (a.data <= 1.0 - eps)
    return _make(np.clip(a.data, eps, 1.0 - eps), (a,), lambda g: (g * mask,), "clamp_prob")


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp, "softmax")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)
    return _make(out, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),),
                 "log_softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    w = s / tot

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * w,)

    return _make(out if keepdims else np.squeeze(out, axis=axis), (a,), vjp, "logsumexp")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform") from None

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    """x[..., i] @ weight[i, o] (+ bias[o]) computed as one 2-D product."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0] or weight.ndim != 2:
        raise ShapeError(f"linear: shapes {x.shape} and {weight.shape} do not conform")
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, x.shape[-1])
    out = flat @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data
        parents.append(bias)

    def vjp(g):
        g2 = g.reshape(-1, weight.shape[1])
        grads = [(g2 @ weight.data.T).reshape(x.shape), flat.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return _make(out.reshape(lead + (weight.shape[1],)), parents, vjp, "linear")


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),),
                 "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) for i in parts)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), vjp, "getitem")


def gather(a, indices, axis: int = 0) -> Tensor:
    """Select slices of ``a`` along ``axis`` (indices may repeat)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    out = np.take(a.data, indices, axis=axis)

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, list(range(axis, axis + indices.ndim)),
                                              list(range(indices.ndim))))
        return (full,)

    return _make(out, (a,), vjp, "gather")


def take_along(a, indices) -> Tensor:
    """Row-wise lookup: out[b, t] = a[b, indices[b, t]] over the second axis."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.int64)
    rows = np.arange(a.shape[0])[:, None]
    out = a.data[rows, indices]

    def vjp(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(full, (rows, indices), g)
        return (full,)

    return _make(out, (a,), vjp, "take_along")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i]
                                     for i in range(ref.ndim) if i != ax):
            raise ShapeError(f"concat: shapes {ref.shape} and {t.shape} do not conform")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError(f"stack: shapes {tensors[0].shape} and {t.shape} do not conform")
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make(out, tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


def where(cond, a, b) -> Tensor:
    """Select elementwise by a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out = np.where(cond, a.data, b.data)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                            _unbroadcast(np.where(cond, 0.0, g), b.shape)), "where")


def stop_gradient(a) -> Tensor:
    return Tensor(as_tensor(a).data)


def dropout(a, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""
    a = as_tensor(a)
    if rng is None or rate <= 0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * keep


# ---------------------------------------------------------------- backward

def _topological(result: Tensor) -> list[Tensor]:
    seen = {id(result)}
    stack_ = [result]
    nodes = []
    while stack_:
        node = stack_.pop()
        nodes.append(node)
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                seen.add(id(p))
                stack_.append(p)
    nodes.sort(key=lambda t: t._id, reverse=True)
    return nodes


def backward(result: Tensor, params: Iterable[Tensor]) -> dict:
    """Gradients of scalar ``result`` with respect to each tensor in ``params``.

    Parameters that did not contribute to ``result`` get a zero gradient.
    Reused parameters accumulate contributions from every use.
    """
    if result.size != 1:
        raise ShapeError(f"backward needs a scalar result, got shape {result.shape}")
    params = list(params)
    grads: dict[int, np.ndarray] = {id(result): np.ones_like(result.data)}
    if result.requires_grad:
        for node in _topological(result):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if node._parents:
                del grads[id(node)]
    return {p: Tensor(grads[id(p)] if id(p) in grads else np.zeros_like(p.data))
            for p in params}


class GradientTape:
    """Context manager recording operations for a single backward pass.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with GradientTape() as tape:
    ...     loss = (w * w * w).sum()
    >>> tape.gradient(loss, [w])[w].data
    array([12.])
    """

    def __enter__(self):
        self._prev = _recording()
        _state.enabled = True
        return self

    def __exit__(self, *exc):
        _state.enabled = self._prev
        return False

    def gradient(self, result: Tensor, params: Iterable[Tensor]) -> dict:
        return backward(result, params)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    checked: int

    @property
    def pass_(self) -> bool:
        return self.passed


def relative_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def grad_check(f: Callable[[Tensor], Tensor], point, step: float = 1e-5,
               tolerance: float = 1e-4, coords: int | None = None,
               rng: np.random.Generator | None = None,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare the reverse-mode gradient of ``f`` at ``point`` with central differences.

    ``coords`` limits the comparison to a random subset of coordinates, which
    keeps checks on large parameter tensors affordable.  ``floor`` bounds the
    relative-error denominator from below; central differences cannot
    resolve components much smaller than ``eps * |f| / step``.
    """
    base = np.array(as_tensor(point).data, dtype=np.float64)
    x = Tensor(base, requires_grad=True)
    value = f(x)
    if not np.all(np.isfinite(value.data)):
        raise NonFiniteError("grad_check: function value is not finite")
    analytic = backward(value, [x])[x].data.ravel()

    idx = np.arange(base.size)
    if coords is not None and coords < base.size:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(base.size, size=coords, replace=False))

    numeric = np.empty(len(idx))
    flat = base.ravel()
    with no_grad():
        for k, i in enumerate(idx):
            plus, minus = flat.copy(), flat.copy()
            plus[i] += step
            minus[i] -= step
            fp = f(Tensor(plus.reshape(base.shape))).data
            fm = f(Tensor(minus.reshape(base.shape))).data
            if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
                raise NonFiniteError("grad_check: function value is not finite")
            numeric[k] = (float(fp) - float(fm)) / (2.0 * step)
    err = float(relative_error(analytic[idx], numeric, floor).max()) if len(idx) else 0.0
    return GradCheckReport(err, err <= tolerance, len(idx))
