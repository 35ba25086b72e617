"""Differentiable operations on NCHW tensors.

Every op computes its forward value with numpy and registers a closure for
the adjoint via :func:`record_op`. Gradients returned by the closures are
already reduced to their input's shape.
"""

from __future__ import annotations

import contextvars
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError
from .tensor import Tensor, as_tensor, record_op

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

# When set (by grad_check), piecewise ops append their active branch pattern
# so a finite-difference stencil that crosses a kink can be detected.
_SWITCH_TRACE: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar(
    "vitiseg_switch_trace", default=None
)


def _trace_switch(pattern: np.ndarray):
    trace = _SWITCH_TRACE.get()
    if trace is not None:
        trace.append(pattern.copy())


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _need_nchw(x: Tensor, op: str):
    if x.ndim != 4:
        raise ConfigError(f"{op} expects an NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return record_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)), "mul",
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return record_op(out, (a, b), backward, "div")


def neg(x: Tensor) -> Tensor:
    return record_op(-x.data, (x,), lambda g: (-g,), "neg")


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return record_op(out, (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return record_op(out, (x,), lambda g: (g * out,), "exp")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient passes only where x is inside."""
    inside = (x.data >= lo) & (x.data <= hi)
    _trace_switch(inside)
    return record_op(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return record_op(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return record_op(
        np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape),), "mean"
    )


def reshape(x: Tensor, shape) -> Tensor:
    return record_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def sigmoid(x: Tensor) -> Tensor:
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return record_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def elu(x: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    xd = x.data
    neg_branch = np.expm1(np.minimum(xd, 0.0))
    pos = xd > 0
    out = np.where(pos, xd, neg_branch)
    return record_op(out, (x,), lambda g: (g * np.where(pos, 1.0, neg_branch + 1.0),), "elu")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dense layer on an (N, D) input with a (D, O) weight."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigError(f"linear: incompatible shapes {x.shape} and {w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        grads = [g @ w.data.T, x.data.T @ g]
        if b is not None:
            grads.append(g.sum(axis=0))
        return grads

    return record_op(out, inputs, backward, "linear")


# ----------------------------------------------------------------- spatial ops

def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (O, C, kh, kw) kernel."""
    _need_nchw(x, "conv2d")
    if kernel.ndim != 4:
        raise ConfigError(f"conv2d kernel must be 4-D, got shape {kernel.shape}")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ConfigError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: need stride >= 1 and padding >= 0, got {stride}, {padding}")
    if bias is not None and bias.shape != (o,):
        raise ConfigError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col: rows are output pixels (n, y, x), columns are (c, i, j)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(o, c * kh * kw)
    out = cols @ kmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = np.ascontiguousarray((g2 @ kmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2))
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [dx, dk]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record_op(out, inputs, backward, "conv2d")


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route to the first element in row-major order."""
    _need_nchw(x, "maxpool2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)[..., None]
    _trace_switch(idx)
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[..., None], axis=-1)
        return (gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return record_op(out, (x,), backward, "maxpool2")


def avgpool3(x: Tensor) -> Tensor:
    """3x3 mean pooling, stride 1, zero padding 1 (divisor always 9)."""
    _need_nchw(x, "avgpool3")
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros_like(x.data)
    for i in range(3):
        for j in range(3):
            out += xp[:, :, i:i + h, j:j + w]
    out /= 9.0

    def backward(g):
        gp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gp[:, :, i:i + h, j:j + w] += g
        return (gp[:, :, 1:1 + h, 1:1 + w] / 9.0,)

    return record_op(out, (x,), backward, "avgpool3")


def global_avg_pool(x: Tensor) -> Tensor:
    _need_nchw(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return record_op(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape),), "global_avg_pool")


def upsample_nearest2(x: Tensor) -> Tensor:
    _need_nchw(x, "upsample_nearest2")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return record_op(
        out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample_nearest2"
    )


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _need_nchw(a, "concat_channels")
    _need_nchw(b, "concat_channels")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ConfigError(f"concat_channels: N/H/W mismatch {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record_op(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]), "concat_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _need_nchw(x, "slice_channels")
    if not 0 <= start < stop <= x.shape[1]:
        raise ConfigError(f"slice_channels: bad range [{start}, {stop}) for {x.shape[1]} channels")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, start:stop] = g
        return (gx,)

    return record_op(x.data[:, start:stop].copy(), (x,), backward, "slice_channels")


# ------------------------------------------------------------- normalization

class RunningStats:
    """Per-channel running mean/variance owned by a batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float64, momentum: float = BN_MOMENTUM):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray):
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * batch_mean
        self.var = m * self.var + (1.0 - m) * batch_var


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_stats: RunningStats,
               mode: str = "train", eps: float = BN_EPS) -> Tensor:
    _need_nchw(x, "batch_norm")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ConfigError(f"batch_norm: gamma/beta must have shape ({c},)")
    shp = (1, c, 1, 1)
    axes = (0, 2, 3)
    if mode == "train":
        if n < 2:
            raise ConfigError("batch_norm in train mode needs a batch of at least 2")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_stats.update(mu, var)
    elif mode == "eval":
        mu, var = running_stats.mean, running_stats.var
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shp)) * inv_std.reshape(shp)
    out = gamma.data.reshape(shp) * xhat + beta.data.reshape(shp)
    count = n * h * w

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shp)
        if mode == "train":
            dx = (inv_std.reshape(shp) / count) * (
                count * dxhat
                - dxhat.sum(axis=axes).reshape(shp)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shp)
            )
        else:
            dx = dxhat * inv_std.reshape(shp)
        return dx, dgamma, dbeta

    return record_op(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------- output & regular.

def softmax_channels(x: Tensor) -> Tensor:
    """Softmax across the two class channels of an N x 2 x H x W tensor."""
    _need_nchw(x, "softmax_channels")
    if x.shape[1] != 2:
        raise ConfigError(f"softmax_channels expects exactly 2 channels, got {x.shape[1]}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return record_op(out, (x,), backward, "softmax_channels")


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], mode: str = "train") -> Tensor:
    """Inverted dropout. Identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    if mode != "train":
        raise ConfigError(f"unknown mode {mode!r}")
    if rng is None:
        raise ConfigError("dropout in train mode needs an explicit rng")
    keep = rng.random(x.shape) >= rate
    scale = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return record_op(x.data * scale, (x,), lambda g: (g * scale,), "dropout")
