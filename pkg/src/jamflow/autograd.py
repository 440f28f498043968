"""A small tape-based reverse-mode autodiff over numpy arrays.

Only the operations the velocity network and the losses need are provided.
Composite layers (RMSNorm, softmax, convolutions, rotary embedding) are fused
ops with hand-written backward rules; gradient tests check every one of them
against central finite differences.

Dtypes are preserved: a float32 graph stays float32 end to end.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None

    # -- plumbing
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
        return self.data.item()

    def __float__(self):
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators
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
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


def _topo(root: Tensor) -> list[Tensor]:
    order, seen, stack = [], set(), [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None and np.issubdtype(like.dtype, np.floating) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, lift(b, a)
    b = lift(b)
    return lift(a, b), b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _node(x.data * sig, (x,), lambda g: (g * sig * (1 + x.data * (1 - sig)),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    d = x.data
    out = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    sig = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    return _node(out.astype(d.dtype), (x,), lambda g: (g * sig.astype(d.dtype),))


def where(cond, a, b) -> Tensor:
    cond = np.asarray(cond, dtype=bool)
    a, b = _pair(a, b)
    return _node(
        np.where(cond, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(np.where(cond, g, 0), a.shape), unbroadcast(np.where(cond, 0, g), b.shape)),
    )


def broadcast_to(x: Tensor, shape) -> Tensor:
    return _node(np.broadcast_to(x.data, shape), (x,), lambda g: (unbroadcast(g, x.shape),))


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _node(x.data.sum(axis=axis, keepdims=keepdims), (x,), back)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def getitem(x: Tensor, idx) -> Tensor:
    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), back)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [lift(x, xs[0]) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]
    return _node(np.concatenate([x.data for x in xs], axis=axis), xs, lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if b.ndim == 2 and a.ndim > 2:
        # (..., n) @ (n, k): fold the leading axes into one GEMM each way
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])

        def back2(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _node((a2 @ b.data).reshape(*lead, b.shape[-1]), (a, b), back2)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)

    return _node(a.data @ b.data, (a, b), back)


def embedding(weight: Tensor, idx) -> Tensor:
    idx = np.asarray(idx)

    def back(g):
        out = np.zeros_like(weight.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (out,)

    return _node(weight.data[idx], (weight,), back)


# ---------------------------------------------------------------- fused layers


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-6) -> Tensor:
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xhat = x.data * inv

    def back(g):
        gh = g * weight.data
        gx = inv * (gh - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        gw = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gw

    return _node(xhat * weight.data, (x, weight), back)


def pad_time(x: Tensor, left: int, right: int, mode: str = "zero") -> Tensor:
    """Pad axis 1 of a (B, T, C) tensor with zeros or edge copies."""
    T = x.shape[1]
    if mode == "zero":
        data = np.pad(x.data, ((0, 0), (left, right), (0, 0)))
    elif mode == "edge":
        data = np.pad(x.data, ((0, 0), (left, right), (0, 0)), mode="edge")
    else:
        raise ValueError(f"unknown pad mode {mode!r}")

    def back(g):
        gx = g[:, left : left + T].copy()
        if mode == "edge":
            gx[:, 0] += g[:, :left].sum(axis=1)
            gx[:, -1] += g[:, left + T :].sum(axis=1)
        return (gx,)

    return _node(data, (x,), back)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid 1-D convolution over time. x: (B, T, Cin), weight: (K, Cin, Cout)."""
    K, cin, cout = weight.shape
    B, T, _ = x.shape
    n_out = (T - K) // stride + 1
    if n_out < 1:
        raise ValueError(f"sequence of length {T} is shorter than kernel {K}")
    span = stride * (n_out - 1) + 1
    patches = np.stack([x.data[:, k : k + span : stride] for k in range(K)], axis=2)  # B, n_out, K, Cin
    w2 = weight.data.reshape(K * cin, cout)
    out = patches.reshape(B, n_out, K * cin) @ w2
    if bias is not None:
        out = out + bias.data

    def back(g):
        gp = (g @ w2.T).reshape(B, n_out, K, cin)
        gx = np.zeros_like(x.data)
        for k in range(K):
            gx[:, k : k + span : stride] += gp[:, :, k]
        gw = (patches.reshape(-1, K * cin).T @ g.reshape(-1, cout)).reshape(K, cin, cout)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back)


def depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' convolution with zero padding. weight: (K, C), K odd."""
    K, C = weight.shape
    T = x.shape[1]
    half = K // 2
    xp = np.pad(x.data, ((0, 0), (half, half), (0, 0)))
    out = np.zeros_like(x.data)
    for k in range(K):
        out += xp[:, k : k + T] * weight.data[k]
    if bias is not None:
        out += bias.data

    def back(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for k in range(K):
            gxp[:, k : k + T] += g * weight.data[k]
            gw[k] = (g * xp[:, k : k + T]).reshape(-1, C).sum(axis=0)
        grads = [gxp[:, half : half + T], gw]
        if bias is not None:
            grads.append(g.reshape(-1, C).sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, back)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary position embedding on the last axis (split-half convention)."""
    half = x.shape[-1] // 2

    def rot(a):
        return np.concatenate([-a[..., half:], a[..., :half]], axis=-1)

    def rot_t(a):
        return np.concatenate([a[..., half:], -a[..., :half]], axis=-1)

    return _node(x.data * cos + rot(x.data) * sin, (x,), lambda g: (g * cos + rot_t(g * sin),))
