"""Dense tensors with tape-based reverse-mode differentiation.

Operations record a node on the innermost active :class:`Tape` whenever one of
their inputs requires a gradient. Without an active tape nothing is recorded,
which is how inference runs.

    with Tape() as tape:
        loss = softmax_cross_entropy(model(x), y)
    backward(tape, loss)
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EmptyBatch, InvalidLabel, NotAScalar, ShapeMismatch

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "Node",
    "backward",
    "add",
    "sub",
    "mul",
    "scale",
    "sum_all",
    "relu",
    "conv2d",
    "batch_norm",
    "linear",
    "avg_pool_global",
    "softmax_cross_entropy",
    "set_check_finite",
]

_CHECK_FINITE = os.environ.get("TMRESNET_CHECK_FINITE", "") not in ("", "0")


def set_check_finite(enabled: bool) -> None:
    """Raise FloatingPointError whenever an op produces a non-finite value."""
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


class Tensor:
    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return sum_all(self)


class Parameter(Tensor):
    """A leaf tensor with a persistent, accumulating gradient buffer."""

    __slots__ = ("grad", "name", "kind")

    def __init__(self, data, name: str = "", kind: str = ""):
        super().__init__(np.array(data), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name
        self.kind = kind

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable  # upstream grad -> tuple of input grads (None where not needed)


class Tape:
    """Append-only record of differentiable operations, in execution order."""

    _stack: list = []

    def __init__(self):
        self.nodes: list = []

    def __enter__(self):
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc):
        Tape._stack.pop()
        return False

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def __len__(self):
        return len(self.nodes)


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _emit(op: str, inputs: Sequence[Tensor], data: np.ndarray, grad_fn: Callable) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = Tape.active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, tuple(inputs), out, grad_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into ``p.grad`` for every Parameter reachable on ``tape``."""
    if loss.size != 1:
        raise NotAScalar(f"loss must have exactly one element, got shape {loss.shape}")
    end = None
    for idx in range(len(tape.nodes) - 1, -1, -1):
        if tape.nodes[idx].output is loss:
            end = idx
            break
    if end is None:
        raise ValueError("loss was not produced on this tape")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: end + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, ig in zip(node.inputs, node.backward(g)):
            if ig is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += ig
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


# Elementwise ------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a, b if isinstance(b, Tensor) else None), _as_tensor(b, a if isinstance(a, Tensor) else None)
    ad, bd = a.data, b.data
    return _emit(
        "mul", (a, b), ad * bd, lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c) if np.issubdtype(a.dtype, np.floating) else c
    return _emit("scale", (a,), a.data * c, lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _emit("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # derivative at exactly 0 is 0
    return _emit("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype), lambda g: (g * mask,))


# Layers -----------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of NCHW ``x`` with OCKK ``w``, zero padding, no bias."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects NCHW input and OCKK weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise ShapeMismatch(f"conv2d input {x.shape} has {c} channels, weight {w.shape} expects {cw}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"conv2d kernel {w.shape} does not fit input {x.shape} with padding {padding}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    wdata = w.data
    out = np.tensordot(win, wdata, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

    def grad_fn(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            # (N, Ho, Wo, C, kh, kw)
            cols = np.tensordot(g, wdata, axes=([1], [0]))
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        return gx, gw

    return _emit("conv2d", (x, w), np.ascontiguousarray(out), grad_fn)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over (N, H, W).

    Training mode normalises with batch statistics and updates the running
    buffers in place (unbiased variance); eval mode uses the running buffers.
    """
    if x.ndim != 4:
        raise ShapeMismatch(f"batch_norm expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if n == 0 or h * w == 0:
        raise EmptyBatch("batch_norm over an empty batch")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch_norm over {c} channels got gamma {gamma.shape}, beta {beta.shape}")
    dt = x.dtype
    axes = (0, 2, 3)
    if training:
        m = n * h * w
        mean = x.data.mean(axis=axes)
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean = running_mean.astype(dt)
        var = running_var.astype(dt)
        centered = x.data - mean.reshape(1, c, 1, 1)
    inv_std = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = centered * inv_std.reshape(1, c, 1, 1)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def grad_fn(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            m = n * h * w
            s1 = dxhat.sum(axis=axes).reshape(1, c, 1, 1)
            s2 = (dxhat * xhat).sum(axis=axes).reshape(1, c, 1, 1)
            dx = (inv_std.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std.reshape(1, c, 1, 1)
        return dx, dgamma, dbeta

    return _emit("batch_norm", (x, gamma, beta), out, grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x @ weight.T + bias, with ``weight`` shaped (out_features, in_features)."""
    xd = x.data.reshape(x.shape[0], -1)
    if xd.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear input {x.shape} does not match weight {weight.shape}")
    in_shape = x.shape
    wd = weight.data
    out = xd @ wd.T
    inputs = [x, weight]
    if bias is not None:
        out = out + bias.data
        inputs.append(bias)

    def grad_fn(g):
        gx = (g @ wd).reshape(in_shape)
        gw = g.T @ xd
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _emit("linear", inputs, out, grad_fn)


def avg_pool_global(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeMismatch(f"avg_pool_global expects NCHW input, got {x.shape}")
    shape = x.shape
    area = shape[2] * shape[3]
    return _emit(
        "avg_pool_global",
        (x,),
        x.data.mean(axis=(2, 3)),
        lambda g: (np.broadcast_to((g / area)[:, :, None, None], shape).copy(),),
    )


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeMismatch(f"logits must be (N, classes), got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if n == 0:
        raise EmptyBatch("cross entropy over an empty batch")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise InvalidLabel(f"labels must be integers in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def grad_fn(g):
        p = ez / sez
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _emit("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=logits.dtype), grad_fn)
