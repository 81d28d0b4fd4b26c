"""Reverse-mode automatic differentiation over numpy arrays.

A minimal tape: every operation returns a `Tensor` holding the result and a
closure that routes upstream gradients to its parents. `Tensor.backward()`
walks the tape in reverse topological order. Everything runs in the dtype of
its inputs, so the same graph code serves float32 training and float64
gradient checking.

Only the primitives the model actually needs are implemented. Composite
layers (GRU cells, attention, layer norm, convolutions) are built from these
in `nn` and the stream modules, which keeps every backward pass short enough
to hand-verify and lets the finite-difference checker cover all of them.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that suspends tape construction (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
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

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar result through the recorded tape."""
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar, got shape {self.data.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    """Create an op result, recording the tape edge only when it matters."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data + b.data

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data * b.data

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    data = a.data / b.data

    def backward(g):
        a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _node(data, (a, b), backward)


def power(a: Tensor, p: float) -> Tensor:
    data = a.data**p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1))

    return _node(data, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape} does not conform")
    data = a.data @ b.data

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(data, (a, b), backward)


# -- elementwise nonlinearities ------------------------------------------------


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _node(data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _node(data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Split by sign to stay overflow-free at either extreme.
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def backward(g):
        a._accumulate(g * data * (1.0 - data))

    return _node(data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _node(data, (a,), backward)


# -- reductions -----------------------------------------------------------------


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).copy())

    return _node(data, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; ties route the gradient to the first hit."""
    idx = np.argmax(a.data, axis=axis)
    data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        buf = np.zeros_like(a.data)
        np.put_along_axis(buf, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        a._accumulate(buf)

    return _node(data, (a,), backward)


# -- softmax family ---------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        a._accumulate(data * (g - (g * data).sum(axis=axis, keepdims=True)))

    return _node(data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        a._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _node(data, (a,), backward)


# -- shape manipulation -------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _node(data, (a,), backward)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = a.data.transpose(axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _node(data, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    data = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.data.shape[axis] for t in ts])[:-1]

    def backward(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return _node(data, tuple(ts), backward)


def take(a: Tensor, idx) -> Tensor:
    """Indexing / gather; the backward pass scatter-adds into the source."""
    data = a.data[idx]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    return _node(data, (a,), backward)


def repeat_rows(a: Tensor, n: int) -> Tensor:
    """Tile a (1, d) row into (n, d); gradient sums back over the copies."""
    if a.data.ndim != 2 or a.data.shape[0] != 1:
        raise ShapeError(f"repeat_rows expects a (1, d) row, got {a.data.shape}")
    data = np.broadcast_to(a.data, (n, a.data.shape[1])).copy()

    def backward(g):
        a._accumulate(g.sum(axis=0, keepdims=True))

    return _node(data, (a,), backward)


# -- convolution support --------------------------------------------------------------


def im2col3d(a: Tensor, kernel: tuple[int, int, int]) -> Tensor:
    """Unfold a (C, T, H, W) volume into patch rows for a same-padded conv.

    Output is (T*H*W, C*kt*kh*kw): one row per output voxel, so a plain
    matmul with the flattened kernel bank performs the convolution. The
    backward pass scatter-adds patch gradients back through the padding.
    """
    kt, kh, kw = kernel
    c, t, h, w = a.data.shape
    pt, ph, pw = kt // 2, kh // 2, kw // 2
    padded = np.pad(a.data, ((0, 0), (pt, pt), (ph, ph), (pw, pw)))
    # windows: (C, T, H, W, kt, kh, kw) -> rows (T*H*W, C*kt*kh*kw)
    win = np.lib.stride_tricks.sliding_window_view(padded, (kt, kh, kw), axis=(1, 2, 3))
    data = win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(t * h * w, c * kt * kh * kw)
    data = np.ascontiguousarray(data)

    def backward(g):
        gwin = g.reshape(t, h, w, c, kt, kh, kw)
        gpad = np.zeros_like(padded)
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    gpad[:, dt : dt + t, dh : dh + h, dw : dw + w] += gwin[:, :, :, :, dt, dh, dw].transpose(3, 0, 1, 2)
        a._accumulate(gpad[:, pt : pt + t, ph : ph + h, pw : pw + w])

    return _node(data, (a,), backward)


def maxpool_spatial(a: Tensor, pool: tuple[int, int]) -> Tensor:
    """Spatial max pooling of a (C, T, H, W) volume; window == stride.

    Trailing rows/columns that do not fill a window are dropped (floor
    semantics). Ties route the gradient to the first element in the window.
    """
    ph, pw = pool
    c, t, h, w = a.data.shape
    oh, ow = h // ph, w // pw
    cropped = a.data[:, :, : oh * ph, : ow * pw]
    win = cropped.reshape(c, t, oh, ph, ow, pw).transpose(0, 1, 2, 4, 3, 5).reshape(c, t, oh, ow, ph * pw)
    idx = np.argmax(win, axis=-1)
    data = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        buf = np.zeros((c, t, oh, ow, ph * pw), dtype=g.dtype)
        np.put_along_axis(buf, idx[..., None], g[..., None], axis=-1)
        buf = buf.reshape(c, t, oh, ow, ph, pw).transpose(0, 1, 2, 4, 3, 5).reshape(c, t, oh * ph, ow * pw)
        full = np.zeros_like(a.data)
        full[:, :, : oh * ph, : ow * pw] = buf
        a._accumulate(full)

    return _node(data, (a,), backward)
