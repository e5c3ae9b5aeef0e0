"""Dense tensor with reverse-mode automatic differentiation.

Values live in numpy arrays (float32 by default). Every op that involves a
tensor with ``requires_grad`` records its parents and a backward closure; the
closure receives the upstream gradient and returns one gradient per parent.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for new tensors (float64 for FD checks)."""
    prev = get_default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(get_default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data, parents, backward):
        out = cls.__new__(Tensor)
        out.data = data
        out.grad = None
        out.name = None
        needs = _grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autograd ----------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf.

        Only leaves (tensors with no recorded parents) keep gradients, so
        calling backward twice on fresh graphs sums into the leaves.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
            if not np.all(np.isfinite(self.data)):
                raise NonFiniteError(f"loss is not finite: {self.data}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators -----------------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=get_default_dtype()))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce(a, b):
    if not isinstance(a, Tensor):
        ref = b.data.dtype if isinstance(b, Tensor) else get_default_dtype()
        a = Tensor(np.asarray(a, dtype=ref))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    return a, b


# -- elementwise ------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b),
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)
    return Tensor._make(out, (a, b), back)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad ** exponent, (a,),
                        lambda g: (g * exponent * ad ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,))


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed without overflow."""
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    sig = np.exp(out)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - sig),))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = _coerce(a, b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    out = np.where(cond, a.data, b.data)
    return Tensor._make(out, (a, b), lambda g: (_unbroadcast(np.where(cond, g, 0), sa),
                                                _unbroadcast(np.where(cond, 0, g), sb)))


# -- reductions -------------------------------------------------------------------
def sum_(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).astype(a.data.dtype),)
    return Tensor._make(out, (a,), back)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum_(a, axis, keepdims), 1.0 / max(n, 1))


def max_(a: Tensor, axis: int, mask: np.ndarray | None = None) -> Tensor:
    """Max along ``axis``; entries where ``mask`` is False are excluded.

    Rows with no valid entry give 0. The gradient flows to the first argmax.
    """
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    idx = np.argmax(x, axis=axis)
    out = np.take_along_axis(x, np.expand_dims(idx, axis), axis).squeeze(axis)
    empty = ~np.isfinite(out)
    out = np.where(empty, 0, out).astype(a.data.dtype)

    def back(g):
        gx = np.zeros_like(a.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(np.where(empty, 0, g), axis), axis)
        return (gx,)
    return Tensor._make(out, (a,), back)


# -- shape ------------------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def back(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, index, g)
        return (gx,)
    return Tensor._make(a.data[index], (a,), back)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return Tensor._make(out, tensors,
                        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def scatter_rows(src: Tensor, index: np.ndarray, n_rows: int) -> Tensor:
    """out[index[i]] = src[i] into a zero tensor with ``n_rows`` rows. Indices must be unique."""
    out = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    out[index] = src.data
    return Tensor._make(out, (src,), lambda g: (g[index],))


# -- linear algebra -----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)
    return Tensor._make(ad @ bd, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight.T + bias, weight shaped [out, in]."""
    y = matmul(x, transpose(weight, (1, 0)))
    return y if bias is None else add(y, bias)


def rowwise_linear(x: Tensor, weight: Tensor) -> Tensor:
    """x @ weight.T for a 2-D ``x`` with a small inner dimension, evaluated as a
    fixed sequence of elementwise multiply-adds so each row's result does not
    depend on how many rows are in the batch (BLAS kernels may block differently)."""
    x, weight = _coerce(x, weight)
    xd, wd = x.data, weight.data
    out = np.zeros((xd.shape[0], wd.shape[0]), dtype=np.result_type(xd, wd))
    for k in range(xd.shape[1]):
        out += xd[:, k:k + 1] * wd[:, k]

    def back(g):
        return g @ wd, g.T @ xd
    return Tensor._make(out, (x, weight), back)


# -- softmax family -------------------------------------------------------------------
def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0,
            mask: np.ndarray | None = None) -> Tensor:
    """softmax(a / T) along ``axis``. Masked-out entries get exactly zero weight."""
    _check_temperature(temperature)
    z = a.data / temperature
    if mask is not None:
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z.astype(np.float64))
    out = (e / e.sum(axis=axis, keepdims=True)).astype(a.data.dtype)

    def back(g):
        s = (g * out).sum(axis=axis, keepdims=True, dtype=np.float64)
        return ((out * (g - s) / temperature).astype(a.data.dtype),)
    return Tensor._make(out, (a,), back)


def log_softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    _check_temperature(temperature)
    z = a.data.astype(np.float64) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = (z - lse).astype(a.data.dtype)
    sm = np.exp(z - lse)

    def back(g):
        s = g.sum(axis=axis, keepdims=True, dtype=np.float64)
        return (((g - sm * s) / temperature).astype(a.data.dtype),)
    return Tensor._make(out, (a,), back)
