"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray and records the operations that produced
it; ``backward()`` walks the tape in reverse topological order and
accumulates gradients into every tensor created with
``requires_grad=True``.  Only the operations the training code needs
are implemented.  Every backward rule is checked against central
finite differences in the test suite.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from ..backend import col2im, im2col

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _sum_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._parents: tuple = ()

    # -- bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        # reassignment (never in-place) keeps shared views safe to alias
        self.grad = g if self.grad is None else self.grad + g

    def backward(self):
        """Backpropagate from this (scalar) tensor through the tape."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar loss tensor")
        topo: list[Tensor] = []
        seen = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _as_pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands, casting bare python scalars to the tensor's dtype
    so mixed expressions never silently promote float32 graphs."""
    if not isinstance(a, Tensor):
        dtype = b.data.dtype if isinstance(a, (int, float, np.floating)) else None
        a = Tensor(np.asarray(a, dtype=dtype))
    if not isinstance(b, Tensor):
        dtype = a.data.dtype if isinstance(b, (int, float, np.floating)) else None
        b = Tensor(np.asarray(b, dtype=dtype))
    return a, b


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = any(p.requires_grad for p in parents)
    return out


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_sum_to_shape(g, a.data.shape))
        b._accumulate(_sum_to_shape(g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_sum_to_shape(g * b.data, a.data.shape))
        b._accumulate(_sum_to_shape(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _as_pair(a, b)
    data = a.data / b.data

    def backward(g):
        a._accumulate(_sum_to_shape(g / b.data, a.data.shape))
        b._accumulate(_sum_to_shape(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(data, (a, b), backward)


def _wants_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data @ b.data

    def backward(g):
        if _wants_grad(a):
            a._accumulate(g @ b.data.T)
        if _wants_grad(b):
            b._accumulate(a.data.T @ g)

    return _make(data, (a, b), backward)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, (a,), backward)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, (a,), backward)


def tsqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / data))

    return _make(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(data, (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the input was interior."""
    data = np.clip(a.data, lo, hi)

    def backward(g):
        a._accumulate(g * ((a.data >= lo) & (a.data <= hi)))

    return _make(data, (a,), backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            grad = np.broadcast_to(g, a.data.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            grad = np.broadcast_to(g, a.data.shape)
        a._accumulate(np.ascontiguousarray(grad))

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def tmax(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; the subgradient flows to the first argmax."""
    idx = np.argmax(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        data = np.squeeze(data, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis), g, axis=axis)
        a._accumulate(grad)

    return _make(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)

    def backward(g):
        if axes is None:
            a._accumulate(g.transpose())
        else:
            a._accumulate(g.transpose(np.argsort(axes)))

    return _make(data, (a,), backward)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            p._accumulate(np.ascontiguousarray(g[tuple(sl)]))

    return _make(data, tuple(parts), backward)


def take_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Row gather (used for positive-pair lookup)."""
    data = a.data[idx]

    def backward(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        a._accumulate(grad)

    return _make(data, (a,), backward)


# -- fused neural-net operations ------------------------------------------


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, NHWC layout, square kernel, weights (k, k, Cin, Cout)."""
    n, h, width, c = x.data.shape
    k, _, cin, cout = w.data.shape
    if cin != c:
        raise ValueError(f"channel mismatch: input {c}, weight {cin}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (width + 2 * padding - k) // stride + 1
    cols = im2col(x.data, k, stride, padding)  # (N*OH*OW, k*k*C)
    wmat = w.data.reshape(-1, cout)
    out2 = cols @ wmat
    if b is not None:
        out2 += b.data
    data = out2.reshape(n, oh, ow, cout)

    def backward(g):
        g2 = g.reshape(-1, cout)
        if _wants_grad(w):
            w._accumulate((cols.T @ g2).reshape(w.data.shape))
        if b is not None and _wants_grad(b):
            b._accumulate(g2.sum(axis=0))
        if _wants_grad(x):
            gcols = g2 @ wmat.T
            x._accumulate(col2im(gcols, n, h, width, c, k, stride, padding))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, backward)


def batch_norm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Batch norm per channel (channels-last), training mode.

    Returns (out, batch_mean, batch_var) so the layer can update its
    running statistics.
    """
    axes = tuple(range(x.data.ndim - 1))
    m = x.data.size // x.data.shape[-1]
    mu = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    data = gamma.data * xhat + beta.data

    def backward(g):
        if _wants_grad(x):
            gxhat = g * gamma.data
            s1 = gxhat.sum(axis=axes)
            s2 = (gxhat * xhat).sum(axis=axes)
            gx = (inv_std / m) * (m * gxhat - s1 - xhat * s2)
            x._accumulate(gx.astype(x.data.dtype, copy=False))
        if _wants_grad(gamma):
            gamma._accumulate((g * xhat).sum(axis=axes))
        if _wants_grad(beta):
            beta._accumulate(g.sum(axis=axes))

    return _make(data, (x, gamma, beta), backward), mu, var


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Computed in the log-sum-exp form so finite logits always produce a
    finite loss.
    """
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    p = ez / sez
    n = z.shape[0]
    nll = (np.log(sez[:, 0]) + zmax[:, 0]) - z[np.arange(n), labels]
    data = np.asarray(nll.mean(), dtype=z.dtype)

    def backward(g):
        grad = p.copy()
        grad[np.arange(n), labels] -= 1.0
        logits._accumulate(grad * (g / n))

    return _make(data, (logits,), backward)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Plain-numpy stable softmax over the last axis (no grad)."""
    z = np.asarray(logits, dtype=np.float64)
    zmax = z.max(axis=-1, keepdims=True)
    ez = np.exp(z - zmax)
    return ez / ez.sum(axis=-1, keepdims=True)


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize each row to unit L2 norm (differentiable composite)."""
    sq = tsum(mul(a, a), axis=1, keepdims=True)
    norm = tsqrt(add(sq, eps))
    return div(a, norm)
