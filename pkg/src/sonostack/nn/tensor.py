"""Reverse-mode autodiff over numpy arrays.

A ``Tensor`` records the op that produced it and a closure that pushes its
gradient to its parents. ``backward`` walks the graph in reverse
topological order. Heavy ops (conv, pooling, normalization) are fused
kernels with hand-written backward passes rather than compositions of
elementwise primitives.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

from ..errors import DegenerateBatch, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
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
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward, op) -> Tensor:
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise & shape ops ------------------------------------------------

def _scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _result(a.data + b, (a,), lambda g: (g,), "add")
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return _scale(as_tensor(a), b)
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    """``a @ b``; either a 2-D weight on the right or equal-rank batched operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return _result(out, (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in parts)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _result(np.array(out), (x,), backward, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _result(out, tensors, backward, "concat")


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    return _result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return _scale(tsum(x, axis, keepdims), 1.0 / float(n))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


_SQRT1_2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data**2) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _result(out.astype(x.dtype, copy=False), (x,), backward, "gelu")


def softmax(x: Tensor, axis=-1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0:
        return x
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- fused layers -----------------------------------------------------------

def _same_pad(k):
    # extra row/column goes at the bottom/right for even kernels
    before = (k - 1) // 2
    return before, k - 1 - before


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 'same' cross-correlation, NHWC input and ``[kh, kw, Cin, Cout]`` kernel."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = kernel.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ShapeError(f"conv2d input has {c} channels, kernel expects {cin}")
    (pt, pb), (pl, pr) = _same_pad(kh), _same_pad(kw)
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = np.concatenate(
        [xp[:, i : i + h, j : j + w, :] for i in range(kh) for j in range(kw)], axis=-1
    ).reshape(n * h * w, kh * kw * cin)
    wmat = kernel.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout)

    def backward(g):
        g2 = g.reshape(n * h * w, cout)
        gk = (cols.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, h, w, kh * kw, cin)
            gxp = np.zeros_like(xp)
            for t, (i, j) in enumerate((i, j) for i in range(kh) for j in range(kw)):
                gxp[:, i : i + h, j : j + w, :] += gcols[:, :, :, t, :]
            gx = gxp[:, pt : pt + h, pl : pl + w, :]
        return (gx, gk, gb) if bias is not None else (gx, gk)

    parents = (x, kernel, bias) if bias is not None else (x, kernel)
    return _result(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, pool: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties send the gradient to the first element in row-major order."""
    n, h, w, c = x.shape
    if h % pool or w % pool:
        raise ShapeError(f"maxpool2d needs spatial dims divisible by {pool}, got {h}x{w}")
    ho, wo = h // pool, w // pool
    win = (
        x.data.reshape(n, ho, pool, wo, pool, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, ho, wo, c, pool * pool)
    )
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gx = (
            gw.reshape(n, ho, wo, c, pool, pool)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, h, w, c)
        )
        return (gx,)

    return _result(out, (x,), backward, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    out = x.data.mean(axis=(1, 2))

    def backward(g):
        return (np.broadcast_to(g[:, None, None, :] / (h * w), x.shape).copy(),)

    return _result(out, (x,), backward, "global_avg_pool")


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
              running_var: np.ndarray, training: bool, momentum: float = 0.9,
              eps: float = 1e-5) -> Tensor:
    """Normalization over every axis but the last (channels).

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        if x.shape[0] < 2:
            raise DegenerateBatch("batch normalization in training mode needs a batch of at least 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mean) * inv_std).astype(x.dtype, copy=False)
    out = xhat * gamma.data + beta.data
    m = x.data.size // x.shape[-1]

    def backward(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            if training:
                gx = (inv_std / m) * (
                    m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
                )
            else:
                gx = dxhat * inv_std
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "batchnorm")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mean = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        flat = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=flat) if gamma.requires_grad else None
        gb = g.sum(axis=flat) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = (inv_std / d) * (
                d * dxhat
                - dxhat.sum(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "layernorm")


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy from raw logits and one-hot labels.

    The gradient reaching ``logits`` is ``(softmax - labels) / N``.
    """
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ShapeError(f"logits must be [N, K>=2], got {logits.shape}")
    labels = np.asarray(labels, dtype=logits.dtype)
    if labels.shape != logits.shape:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - lse
    loss = -(labels * log_probs).sum() / n

    def backward(g):
        return (g * (np.exp(log_probs) - labels) / n,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def one_hot(labels, n_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out
