"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ``ndarray``. Operations on tensors that require
gradients record a backward closure and their parents; :func:`backward`
walks that graph in reverse topological order.

Leaf tensors created with ``requires_grad=True`` own a persistent ``grad``
accumulator of the same shape. Intermediate results never hold one; their
gradients live only for the duration of a backward pass.

Every op checks its output for non-finite values. NaN always raises. An
infinity is tolerated only when one of the op's inputs already carried one,
which happens legitimately after :func:`masked_fill` with ``-inf``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import NonFiniteValue, NonScalarLoss, ShapeMismatch

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_grad_seen")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            arr = np.asarray(data)
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
        else:
            arr = np.asarray(data, dtype=dtype)
        arr = np.array(arr, copy=True)
        if not np.isfinite(arr).all():
            raise NonFiniteValue(f"tensor {name or ''} created with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._grad_seen = False

    @classmethod
    def _node(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable,
              allow_inf: bool = False) -> Tensor:
        if not allow_inf:
            _check_finite(data, parents)
        elif np.isnan(data).any():
            raise NonFiniteValue("operation produced NaN")
        out = cls.__new__(cls)
        out.data = data
        out.name = None
        out.grad = None
        out._grad_seen = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0
        self._grad_seen = False

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g
        self._grad_seen = True

    @property
    def grad_seen(self) -> bool:
        """Whether a gradient arrived since the last :meth:`zero_grad`."""
        return self._grad_seen

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar ------------------------------------------------
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

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)


def _check_finite(data: np.ndarray, parents: Sequence[Tensor]) -> None:
    if np.isfinite(data).all():
        return
    if np.isnan(data).any():
        raise NonFiniteValue("operation produced NaN")
    for p in parents:
        if not np.isfinite(p.data).all():
            return
    raise NonFiniteValue("operation produced an infinity from finite inputs")


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(fn, a: Tensor, b: Tensor, opname: str) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeMismatch(f"{opname}: {a.shape} vs {b.shape}") from exc


# -- elementwise arithmetic -----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _binary(np.add, a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._node(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _binary(np.subtract, a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._node(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor._node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _binary(np.multiply, a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = _binary(np.divide, a, b, "div")

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._node(out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._node(out, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return Tensor._node(out, (a,), lambda g: (g * 0.5 / out,))


# -- nonlinearities ---------------------------------------------------------

def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return Tensor._node(out, (a,), lambda g: (g * (a.data > 0),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._node(out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return Tensor._node(out, (a,), lambda g: (g * out * (1 - out),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._node(out, (a,), backward)


def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * (e / s),)

    return Tensor._node(out, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeMismatch(f"layer_norm: features {x.shape[-1:]} vs gamma {gamma.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, xd.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, ggamma, gbeta

    return Tensor._node(out, (x, gamma, beta), backward)


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    A, Bm = a.data, b.data
    if A.ndim == 0 or Bm.ndim == 0:
        raise ShapeMismatch("matmul: scalar operand")
    if A.shape[-1] != Bm.shape[-2 if Bm.ndim > 1 else 0]:
        raise ShapeMismatch(f"matmul: {A.shape} @ {Bm.shape}")
    out = _binary(np.matmul, a, b, "matmul")

    def backward(g):
        a2 = A[None, :] if A.ndim == 1 else A
        b2 = Bm[:, None] if Bm.ndim == 1 else Bm
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if Bm.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = g2 @ np.swapaxes(b2, -1, -2)
            if A.ndim == 1:
                ga = ga[..., 0, :]
            ga = _unbroadcast(ga, A.shape)
        if b.requires_grad:
            if b2.ndim == 2 and a2.ndim > 2:
                k = a2.shape[-1]
                gb = a2.reshape(-1, k).T @ g2.reshape(-1, g2.shape[-1])
            else:
                gb = np.swapaxes(a2, -1, -2) @ g2
            if Bm.ndim == 1:
                gb = gb[..., 0]
            gb = _unbroadcast(gb, Bm.shape)
        return ga, gb

    return Tensor._node(out, (a, b), backward)


# -- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._node(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return Tensor._node(np.asarray(out), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {a.shape} -> {shape}") from exc
    return Tensor._node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._node(out, (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return Tensor._node(np.array(out, copy=True), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in tensors]}") from exc
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._node(out, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return concat([reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                   for t in tensors], axis=axis)


# -- masking and regularization ---------------------------------------------

def masked_fill(a: Tensor, keep, value: float) -> Tensor:
    """Replace entries where ``keep`` is False with ``value``.

    ``keep`` is a boolean array broadcastable to ``a``; True marks entries
    that pass through unchanged.
    """
    keep = np.asarray(keep, dtype=bool)
    try:
        if np.broadcast_shapes(keep.shape, a.shape) != a.shape:
            raise ShapeMismatch(f"masked_fill: mask {keep.shape} does not fit {a.shape}")
    except ValueError as exc:
        raise ShapeMismatch(f"masked_fill: mask {keep.shape} vs {a.shape}") from exc
    fill = np.asarray(value, dtype=a.dtype)
    out = np.where(keep, a.data, fill)
    # deliberate infinities (e.g. -inf attention logits) are the point of this op
    return Tensor._node(out, (a,), lambda g: (np.where(keep, g, 0),), allow_inf=True)


def dropout(a: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity when not training or when ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    scale = np.asarray(1.0 / (1.0 - rate), dtype=a.dtype)
    m = (rng.random(a.shape) >= rate).astype(a.dtype) * scale
    return Tensor._node(a.data * m, (a,), lambda g: (g * m,))


# -- losses -----------------------------------------------------------------

def bce_with_logits(logits: Tensor, targets, pos_weight: float | None = None) -> Tensor:
    """Mean binary cross-entropy on raw logits, computed without overflow."""
    y = np.asarray(targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeMismatch(f"bce: logits {logits.shape} vs targets {y.shape}")
    x = logits.data
    softplus_neg = np.log1p(np.exp(-np.abs(x))) + np.maximum(-x, 0)  # log(1 + e^-x)
    w = 1.0 if pos_weight is None else pos_weight
    coef = 1.0 + (w - 1.0) * y
    per = (1 - y) * x + coef * softplus_neg
    n = x.size
    out = np.asarray(per.mean(), dtype=logits.dtype)

    def backward(g):
        s = _sigmoid_np(x)
        return (g * ((1 - y) - coef * (1 - s)) / n,)

    return Tensor._node(out, (logits,), backward)


# -- backward pass ----------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p._backward is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise NonScalarLoss(f"loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        loss.accumulate_grad(seed)
        return
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                p.accumulate_grad(pg)
            else:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
