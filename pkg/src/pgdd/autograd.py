"""Minimal reverse-mode autodiff over numpy arrays.

Only the handful of ops the denoiser and guide networks need are provided.
Every op computes in float64. A node keeps its parents only when at least one
of them requires a gradient, so forwards over frozen parameters and constant
inputs build no graph at all.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

Array = np.ndarray


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray <op> Tensor defers to the reflected Tensor op

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def backward(self, grad: Array | None = None) -> None:
        """Accumulate gradients into every reachable leaf that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, Array] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg
        # free the graph so activations can be collected
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: Array, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = expit(a.data)
    out = a.data * sig
    return _node(out, (a,), lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


def linear(x, w, b=None) -> Tensor:
    """x @ w + b with x of shape (B, in) and w of shape (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    out = x.data @ w.data
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
        parents.append(b)

    def backward(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.T @ g if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if b.requires_grad else None)

    return _node(out, parents, backward)


def concat(parts: Sequence, axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _node(
        np.concatenate([p.data for p in parts], axis=axis),
        parts,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def conv2d(x, w, b=None) -> Tensor:
    """Stride-1 'same' convolution. x: (B, C, H, W); w: (O, C, k, k) with odd k."""
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[-1]
    pad = k // 2
    if k == 1:
        cols = x.data
        out = np.einsum("bchw,oc->bohw", cols, w.data[:, :, 0, 0], optimize=True)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B, C, H, W, k, k)
        out = np.tensordot(cols, w.data, axes=((1, 4, 5), (1, 2, 3))).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gx = gw = None
        if k == 1:
            if x.requires_grad:
                gx = np.einsum("bohw,oc->bchw", g, w.data[:, :, 0, 0], optimize=True)
            if w.requires_grad:
                gw = np.einsum("bohw,bchw->oc", g, cols, optimize=True)[:, :, None, None]
        else:
            if x.requires_grad:
                gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
                gcols = sliding_window_view(gp, (k, k), axis=(2, 3))  # (B, O, H, W, k, k)
                wf = w.data[:, :, ::-1, ::-1]
                gx = np.tensordot(gcols, wf, axes=((1, 4, 5), (0, 2, 3))).transpose(0, 3, 1, 2)
            if w.requires_grad:
                gw = np.tensordot(g, cols, axes=((0, 2, 3), (0, 2, 3)))
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=(0, 2, 3)) if b.requires_grad else None)

    return _node(out, parents, backward)


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return _node(out, (x,), lambda g: (np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25,))


def upsample2(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _node(out, (x,), lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


def sum_squares(a) -> Tensor:
    """Per-sample sum of squares over all non-batch axes, shape (B,)."""
    a = as_tensor(a)
    axes = tuple(range(1, a.data.ndim))
    out = (a.data**2).sum(axis=axes)
    return _node(out, (a,), lambda g: (2.0 * a.data * g.reshape((-1,) + (1,) * len(axes)),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _node(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))
