"""Rank-4 tensors and the forward/backward kernels of every supported op.

All arrays use the (batch, channel, height, width) layout.  Each ``*_forward``
returns ``(output, cache)`` and the matching ``*_backward`` consumes the
upstream gradient plus that cache.  Kernels follow the dtype of their input,
so analysis paths run in float64 and training may run in float32.

Convolution is one im2col contraction over (channel, row, column).  Appended
all-zero kernel taps only insert exact zeros into that sequence, so kernel
padding leaves outputs unchanged.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

__all__ = [
    "Tensor4",
    "out_size",
    "conv2d_forward",
    "conv2d_backward",
    "maxpool_forward",
    "maxpool_backward",
    "avgpool_forward",
    "avgpool_backward",
    "relu_forward",
    "relu_backward",
    "batchnorm_forward",
    "batchnorm_backward",
    "fc_forward",
    "fc_backward",
    "gap_forward",
    "gap_backward",
]


@dataclass
class Tensor4:
    """Dense (N, C, H, W) array with an optional gradient of the same shape."""

    data: np.ndarray
    grad: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dimensions, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        if self.grad is not None:
            self.grad = np.asarray(self.grad)
            if self.grad.shape != self.data.shape:
                raise ShapeError(
                    f"gradient shape {self.grad.shape} differs from data shape {self.data.shape}"
                )

    @property
    def shape(self):
        return self.data.shape

    @classmethod
    def zeros(cls, n, c, h, w, dtype=np.float64):
        return cls(np.zeros((n, c, h, w), dtype=dtype))

    def copy(self):
        return Tensor4(self.data.copy(), None if self.grad is None else self.grad.copy())


def out_size(size, kernel, stride, pad_lo, pad_hi):
    """Output extent of a sliding window along one axis."""
    return (size + pad_lo + pad_hi - kernel) // stride + 1


def _pad(x, padding, value=0.0):
    pt, pb, pl, pr = padding
    if not any(padding):
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)), constant_values=value)


def _window(xp, i, j, stride, ho, wo):
    sh, sw = stride
    return xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw]


def _geometry(x_shape, kernel, stride, padding):
    _, _, h, w = x_shape
    kh, kw = kernel
    pt, pb, pl, pr = padding
    ho = out_size(h, kh, stride[0], pt, pb)
    wo = out_size(w, kw, stride[1], pl, pr)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"window {kh}x{kw} stride {stride} padding {padding} does not fit input {h}x{w}"
        )
    return ho, wo


def _columns(xp, kernel, stride, ho, wo):
    """im2col matrix: one row per window placement, (C, kh, kw) per column."""
    view = sliding_window_view(xp, kernel, axis=(2, 3))
    view = view[:, :, : stride[0] * (ho - 1) + 1 : stride[0], : stride[1] * (wo - 1) + 1 : stride[1]]
    n, c = xp.shape[:2]
    return view.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kernel[0] * kernel[1])


def conv2d_forward(x, weight, bias, stride, padding, keep_columns=False):
    """Convolution (cross-correlation) with asymmetric zero padding.

    ``keep_columns`` stores the im2col matrix in the cache so backward does
    not rebuild it; worth it for training, too large for deep analysis nets.
    """
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv expects {weight.shape[1]} input channels, got {x.shape[1]}")
    o, _, kh, kw = weight.shape
    ho, wo = _geometry(x.shape, (kh, kw), stride, padding)
    xp = _pad(x, padding)
    cols = _columns(xp, (kh, kw), stride, ho, wo)
    out = cols @ weight.reshape(o, -1).T
    out = np.ascontiguousarray(out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias[None, :, None, None]
    return out, (xp, x.shape, cols if keep_columns else None)


def conv2d_backward(grad, cache, weight, stride, padding, with_bias, need_input=True):
    xp, x_shape, cols = cache
    n, c, h, w = x_shape
    o, _, kh, kw = weight.shape
    ho, wo = grad.shape[2:]
    sh, sw = stride
    if cols is None:
        cols = _columns(xp, (kh, kw), stride, ho, wo)
    g2d = grad.transpose(0, 2, 3, 1).reshape(-1, o)
    gw = (g2d.T @ cols).reshape(weight.shape).astype(weight.dtype, copy=False)
    gb = grad.sum(axis=(0, 2, 3)) if with_bias else None
    if not need_input:
        return None, gw, gb
    gcols = (g2d @ weight.reshape(o, -1)).reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += gcols[..., i, j].transpose(0, 3, 1, 2)
    pt, _, pl, _ = padding
    return np.ascontiguousarray(gxp[:, :, pt : pt + h, pl : pl + w]), gw, gb


def maxpool_forward(x, kernel, stride, padding):
    """Max pooling over -inf padding; ties resolve to the first row-major offset."""
    kh, kw = kernel
    ho, wo = _geometry(x.shape, kernel, stride, padding)
    xp = _pad(x, padding, value=-np.inf)
    best = np.full((x.shape[0], x.shape[1], ho, wo), -np.inf, dtype=x.dtype)
    arg = np.zeros(best.shape, dtype=np.int32)
    for idx in range(kh * kw):
        xs = _window(xp, idx // kw, idx % kw, stride, ho, wo)
        better = xs > best
        best = np.where(better, xs, best)
        arg[better] = idx
    return best, (arg, xp.shape, x.shape)


def maxpool_backward(grad, cache, kernel, stride, padding):
    arg, xp_shape, x_shape = cache
    kh, kw = kernel
    sh, sw = stride
    ho, wo = grad.shape[2:]
    gxp = np.zeros(xp_shape, dtype=grad.dtype)
    for idx in range(kh * kw):
        i, j = divmod(idx, kw)
        gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += np.where(arg == idx, grad, 0)
    pt, _, pl, _ = padding
    return np.ascontiguousarray(gxp[:, :, pt : pt + x_shape[2], pl : pl + x_shape[3]])


def avgpool_forward(x, kernel, stride, padding):
    """Average pooling; zero padding counts toward the divisor."""
    kh, kw = kernel
    ho, wo = _geometry(x.shape, kernel, stride, padding)
    xp = _pad(x, padding)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += _window(xp, i, j, stride, ho, wo)
    return out / (kh * kw), (xp.shape, x.shape)


def avgpool_backward(grad, cache, kernel, stride, padding):
    xp_shape, x_shape = cache
    kh, kw = kernel
    sh, sw = stride
    ho, wo = grad.shape[2:]
    gxp = np.zeros(xp_shape, dtype=grad.dtype)
    share = grad / (kh * kw)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += share
    pt, _, pl, _ = padding
    return np.ascontiguousarray(gxp[:, :, pt : pt + x_shape[2], pl : pl + x_shape[3]])


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype, copy=False), mask


def relu_backward(grad, mask):
    return np.where(mask, grad, 0).astype(grad.dtype, copy=False)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization.

    In train mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, as PyTorch does).  In
    eval mode the running buffers are used and nothing is mutated.
    """
    if train:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        count = x.shape[0] * x.shape[2] * x.shape[3]
        unbiased = var * count / max(count - 1, 1)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out.astype(x.dtype, copy=False), (xhat, inv_std, train)


def batchnorm_backward(grad, cache, gamma):
    xhat, inv_std, train = cache
    g_gamma = (grad * xhat).sum(axis=(0, 2, 3))
    g_beta = grad.sum(axis=(0, 2, 3))
    scale = (gamma * inv_std)[None, :, None, None]
    if not train:
        return grad * scale, g_gamma, g_beta
    count = grad.shape[0] * grad.shape[2] * grad.shape[3]
    gx = scale * (
        grad
        - g_beta[None, :, None, None] / count
        - xhat * g_gamma[None, :, None, None] / count
    )
    return gx.astype(grad.dtype, copy=False), g_gamma, g_beta


def fc_forward(x, weight, bias):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weight.shape[1]:
        raise ShapeError(f"fc expects {weight.shape[1]} input features, got {flat.shape[1]}")
    out = flat @ weight.T
    if bias is not None:
        out += bias
    return out[:, :, None, None], (flat, x.shape)


def fc_backward(grad, cache, weight, with_bias):
    flat, x_shape = cache
    g = grad.reshape(grad.shape[0], -1)
    gx = (g @ weight).reshape(x_shape)
    gw = g.T @ flat
    gb = g.sum(axis=0) if with_bias else None
    return gx, gw, gb


def gap_forward(x):
    return x.mean(axis=(2, 3), keepdims=True), x.shape


def gap_backward(grad, x_shape):
    h, w = x_shape[2:]
    return np.broadcast_to(grad / (h * w), x_shape).copy()
