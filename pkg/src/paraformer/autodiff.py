"""Minimal reverse-mode differentiation over dense numpy arrays.

``Tensor`` wraps an ndarray and records the operation that produced it.
Operations whose inputs are all constants return constants, so the tape only
covers paths that lead back to a parameter. The free functions at the bottom
(``softmax``, ``relu``, ``spmm`` ...) accept either ndarrays or Tensors, which
lets the attention kernels run unchanged on both.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected ops

    def __init__(self, value, requires_grad: bool = False, parents=(), backward=None, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents = parents
        self._backward = backward

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def __getitem__(self, idx):
        return index(self, idx)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf requiring grad."""
        if grad is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.value)
        order, seen = [], set()
        stack = [(self, False)]
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
                if isinstance(p, Tensor) and p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _val(x):
    return x.value if isinstance(x, Tensor) else x


def _needs(*xs) -> bool:
    return any(isinstance(x, Tensor) and x.requires_grad for x in xs)


def _node(value, parents, backward):
    if _needs(*parents):
        return Tensor(value, requires_grad=True, parents=parents, backward=backward)
    if any(isinstance(p, Tensor) for p in parents):
        return Tensor(value)
    return value


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv

    def back(g):
        return _unbroadcast(g, np.shape(av)), _unbroadcast(g, np.shape(bv))

    return _node(out, (a, b), back)


def neg(a):
    return _node(-_val(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = _val(a), _val(b)

    def back(g):
        ga = _unbroadcast(g * bv, np.shape(av)) if _needs(a) else None
        gb = _unbroadcast(g * av, np.shape(bv)) if _needs(b) else None
        return ga, gb

    return _node(av * bv, (a, b), back)


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv

    def back(g):
        ga = _unbroadcast(g / bv, np.shape(av)) if _needs(a) else None
        gb = _unbroadcast(-g * out / bv, np.shape(bv)) if _needs(b) else None
        return ga, gb

    return _node(out, (a, b), back)


def matmul(a, b):
    av, bv = _val(a), _val(b)

    def back(g):
        ga = g @ bv.T if _needs(a) else None
        gb = av.T @ g if _needs(b) else None
        return ga, gb

    return _node(av @ bv, (a, b), back)


def transpose(a):
    return _node(_val(a).T, (a,), lambda g: (g.T,))


def reshape(a, shape):
    av = _val(a)
    return _node(av.reshape(shape), (a,), lambda g: (g.reshape(av.shape),))


def index(a, idx):
    av = _val(a)

    def back(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return (full,)

    return _node(av[idx], (a,), back)


def tsum(a, axis=None, keepdims=False):
    av = _val(a)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _node(av.sum(axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None):
    av = _val(a)
    count = av.size if axis is None else av.shape[axis]
    return mul(tsum(a, axis=axis), 1.0 / count)


def tmax(a, axis=0):
    """Max reduction; the gradient goes to the first maximizing entry."""
    av = _val(a)
    arg = np.argmax(av, axis=axis)
    out = np.take_along_axis(av, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    if isinstance(a, Tensor):
        return _node(out, (a,), back)
    return out


def relu(a):
    av = _val(a)
    mask = av > 0
    if not isinstance(a, Tensor):
        return av * mask
    return _node(av * mask, (a,), lambda g: (g * mask,))


def sqrt(a):
    av = _val(a)
    out = np.sqrt(av)
    if not isinstance(a, Tensor):
        return out
    return _node(out, (a,), lambda g: (g / (2.0 * out),))


def log(a, floor: float = 0.0):
    """Natural log of ``max(a, floor)``; entries at the floor get zero gradient."""
    av = _val(a)
    clipped = np.maximum(av, floor)
    out = np.log(clipped)
    if not isinstance(a, Tensor):
        return out
    live = av > floor if floor > 0 else np.ones(av.shape, dtype=bool)
    return _node(out, (a,), lambda g: (np.where(live, g / clipped, 0.0),))


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def softmax(x, axis: int = -1):
    """Max-subtracted softmax along ``axis``."""
    out = _softmax_np(_val(x), axis)
    if not isinstance(x, Tensor):
        return out

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), back)


def log_softmax(x, axis: int = -1):
    xv = _val(x)
    z = xv - xv.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    if not isinstance(x, Tensor):
        return out
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), back)


def spmm(s, x):
    """Constant (sparse or dense) matrix times ``x``."""
    xv = _val(x)
    out = s @ xv
    if sp.issparse(out):
        out = out.toarray()
    out = np.asarray(out)
    if not isinstance(x, Tensor):
        return out
    st = s.T

    def back(g):
        r = st @ g
        return (None, np.asarray(r.toarray() if sp.issparse(r) else r))

    return _node(out, (None, x), back)


def dropout(x, rate: float, rng: np.random.Generator | None, train: bool):
    """Inverted dropout; identity when not training or rate == 0."""
    if not train or rate <= 0.0:
        return x
    keep = rng.random(_val(x).shape) >= rate
    return mul(x, keep / (1.0 - rate))


def value(x) -> np.ndarray:
    return _val(x)
