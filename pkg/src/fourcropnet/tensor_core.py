"""Numerical kernels for NHWC image tensors.

Every differentiable kernel comes as a pair ``<op>_forward`` / ``<op>_backward``.
The forward returns ``(out, cache)``; the backward takes the upstream gradient
and that cache and returns gradients for each differentiable input.

Tensors are plain :class:`numpy.ndarray` objects in N x H x W x C layout.
"""
from __future__ import annotations

import contextlib
import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError

_DEFAULT_DTYPE = np.float32


def get_dtype():
    return _DEFAULT_DTYPE


def set_dtype(dtype) -> None:
    """Set the global floating dtype (float32 for training, float64 for gradient checks)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    previous = _DEFAULT_DTYPE
    set_dtype(dtype)
    try:
        yield
    finally:
        set_dtype(previous)


def as_tensor(x, dtype=None) -> np.ndarray:
    return np.asarray(x, dtype=dtype or _DEFAULT_DTYPE)


def _check_finite(name: str, *arrays) -> None:
    if os.environ.get("FCN_CHECK_FINITE") != "1":
        return
    for a in arrays:
        if a is not None and not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite value produced by {name}")


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.kernel < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("kernel and channel counts must be positive")

    def output_extent(self, size: int) -> int:
        out = (size - self.kernel + 2 * self.padding) // self.stride + 1
        if out < 1:
            raise DimensionMismatchError("spatial", f">= {self.kernel - 2 * self.padding}", size)
        return out

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.kernel, self.kernel, self.in_channels, self.out_channels)


def _check_conv_args(x, w, b, spec: ConvSpec):
    if x.ndim != 4:
        raise DimensionMismatchError("rank", 4, x.ndim)
    if x.shape[3] != spec.in_channels:
        raise DimensionMismatchError("channels", spec.in_channels, x.shape[3])
    if w.shape != spec.weight_shape:
        raise DimensionMismatchError("weights", spec.weight_shape, w.shape)
    if b.shape != (spec.out_channels,):
        raise DimensionMismatchError("bias", (spec.out_channels,), b.shape)


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Unfold patches into rows ordered (kh, kw, c_in); shape (N*H'*W', K*K*C_in)."""
    n, h, w, c = x.shape
    k, s = spec.kernel, spec.stride
    ho, wo = spec.output_extent(h), spec.output_extent(w)
    xp = _pad(x, spec.padding)
    cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + s * ho:s, j:j + s * wo:s, :]
    return cols.reshape(n * ho * wo, k * k * c)


def col2im(cols: np.ndarray, x_shape, spec: ConvSpec) -> np.ndarray:
    n, h, w, c = x_shape
    k, s, p = spec.kernel, spec.stride, spec.padding
    ho, wo = spec.output_extent(h), spec.output_extent(w)
    cols = cols.reshape(n, ho, wo, k, k, c)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += cols[:, :, :, i, j, :]
    if p == 0:
        return dxp
    return dxp[:, p:p + h, p:p + w, :]


def conv2d_direct(x, w, b, spec: ConvSpec) -> np.ndarray:
    """Reference cross-correlation by explicit loops. Slow; used to validate im2col."""
    _check_conv_args(x, w, b, spec)
    n, h, wd, _ = x.shape
    k, s = spec.kernel, spec.stride
    ho, wo = spec.output_extent(h), spec.output_extent(wd)
    xp = _pad(x, spec.padding)
    out = np.empty((n, ho, wo, spec.out_channels), dtype=np.result_type(x, w))
    for bi in range(n):
        for oy in range(ho):
            for ox in range(wo):
                patch = xp[bi, oy * s:oy * s + k, ox * s:ox * s + k, :]
                for co in range(spec.out_channels):
                    out[bi, oy, ox, co] = np.sum(patch * w[:, :, :, co]) + b[co]
    return out


def conv2d_forward(x, w, b, spec: ConvSpec):
    _check_conv_args(x, w, b, spec)
    n, h, wd, _ = x.shape
    ho, wo = spec.output_extent(h), spec.output_extent(wd)
    cols = im2col(x, spec)
    out = cols @ w.reshape(-1, spec.out_channels) + b
    out = out.reshape(n, ho, wo, spec.out_channels)
    _check_finite("conv2d", out)
    return out, (cols, x.shape, w, spec)


def conv2d_backward(dout, cache):
    """Return (dx, dw, db)."""
    cols, x_shape, w, spec = cache
    d2 = dout.reshape(-1, spec.out_channels)
    db = d2.sum(axis=0)
    dw = (cols.T @ d2).reshape(w.shape)
    dcols = d2 @ w.reshape(-1, spec.out_channels).T
    dx = col2im(dcols, x_shape, spec)
    _check_finite("conv2d_backward", dx, dw, db)
    return dx, dw, db


def maxpool2d_forward(x, window: int = 2, stride: int = 2):
    """Non-overlapping max pooling; returns (out, cache) where cache holds argmax indices."""
    if window != stride:
        raise ValueError("only non-overlapping pooling (window == stride) is supported")
    n, h, w, c = x.shape
    if h % window or w % window:
        raise DimensionMismatchError("spatial", f"multiple of {window}", (h, w))
    ho, wo = h // window, w // window
    blocks = x.reshape(n, ho, window, wo, window, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, ho, wo, c, window * window)
    argmax = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, argmax[..., None], axis=-1)[..., 0]
    return out, (x.shape, argmax, window)


def maxpool2d_backward(dout, cache):
    x_shape, argmax, window = cache
    n, h, w, c = x_shape
    ho, wo = h // window, w // window
    dblocks = np.zeros((n, ho, wo, c, window * window), dtype=dout.dtype)
    np.put_along_axis(dblocks, argmax[..., None], dout[..., None], axis=-1)
    dblocks = dblocks.reshape(n, ho, wo, c, window, window).transpose(0, 1, 4, 2, 5, 3)
    return dblocks.reshape(x_shape)


def global_avg_pool_forward(x):
    if x.ndim != 4:
        raise DimensionMismatchError("rank", 4, x.ndim)
    return x.mean(axis=(1, 2)), x.shape


def global_avg_pool_backward(dout, x_shape):
    n, h, w, c = x_shape
    return np.broadcast_to((dout / (h * w))[:, None, None, :], x_shape).copy()


def dense_forward(x, w, b):
    if x.ndim != 2:
        raise DimensionMismatchError("rank", 2, x.ndim)
    if w.shape[0] != x.shape[1]:
        raise DimensionMismatchError("features", w.shape[0], x.shape[1])
    if b.shape != (w.shape[1],):
        raise DimensionMismatchError("bias", (w.shape[1],), b.shape)
    out = x @ w + b
    _check_finite("dense", out)
    return out, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def relu_forward(x):
    return np.maximum(x, 0), x


def relu_backward(dout, x):
    # subgradient at 0 is 0
    return dout * (x > 0)


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    # keep gates strictly inside (0, 1) even where exp saturates
    one, zero = out.dtype.type(1), out.dtype.type(0)
    return np.clip(out, np.nextafter(zero, one), np.nextafter(one, zero))


def sigmoid_forward(x):
    s = sigmoid(x)
    return s, s


def sigmoid_backward(dout, s):
    return dout * s * (1 - s)


def softmax(logits):
    if logits.ndim != 2:
        raise DimensionMismatchError("rank", 2, logits.ndim)
    if logits.shape[1] < 2:
        raise DimensionMismatchError("classes", ">= 2", logits.shape[1])
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)
