"""Layer operations for NCHW image tensors: convolutions, dense, pooling.

Convolutions run as im2col + matmul. All ops validate shapes up front and
raise :class:`ShapeError` naming the op and the offending dimensions.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    _as_tensor,
    _record,
    add,
    concat,
    hardswish,
    relu,
    sigmoid,
)


def _conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _check_conv_args(op: str, x: Tensor, w: Tensor, stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be NCHW, got shape {x.shape}")
    if w.ndim != 4:
        raise ShapeError(f"{op}: weight must be 4-D, got shape {w.shape}")
    if not isinstance(stride, int) or stride <= 0:
        raise ShapeError(f"{op}: stride must be a positive int, got {stride!r}")
    if not isinstance(padding, int) or padding < 0:
        raise ShapeError(f"{op}: padding must be a non-negative int, got {padding!r}")
    kh, kw = w.shape[2], w.shape[3]
    oh = _conv_out_size(x.shape[2], kh, stride, padding)
    ow = _conv_out_size(x.shape[3], kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"{op}: kernel {kh}x{kw} stride {stride} pad {padding} does not fit "
            f"input {x.shape[2]}x{x.shape[3]}")


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Patch tensor of shape (N, C, kh, kw, Ho, Wo)."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    s = x.strides
    view = np.lib.stride_tricks.as_strided(
        x, (n, c, kh, kw, ho, wo),
        (s[0], s[1], s[2], s[3], s[2] * stride, s[3] * stride))
    return np.ascontiguousarray(view)


def _col2im(cols: np.ndarray, x_shape: tuple, stride: int, pad: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patches back onto the input grid."""
    n, c, h, w = x_shape
    _, _, kh, kw, ho, wo = cols.shape
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad:-pad, pad:-pad]
    return dx


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Standard convolution. weight: (out_c, in_c, kh, kw), bias: (out_c,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_conv_args("conv2d", x, weight, stride, padding)
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input channels {x.shape[1]} != weight in-channels "
            f"{weight.shape[1]} (input {x.shape}, weight {weight.shape})")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")

    n, _, _, _ = x.shape
    oc, ic, kh, kw = weight.shape
    cols = _im2col(x.data, kh, kw, stride, padding)
    ho, wo = cols.shape[4], cols.shape[5]
    flat = cols.reshape(n, ic * kh * kw, ho * wo)
    wf = weight.data.reshape(oc, ic * kh * kw)
    out = np.einsum("of,nfl->nol", wf, flat).reshape(n, oc, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    x_shape = x.shape

    def bw(g):
        gl = g.reshape(n, oc, ho * wo)
        dw = np.einsum("nol,nfl->of", gl, flat).reshape(weight.shape)
        dflat = np.einsum("of,nol->nfl", wf, gl)
        dx = _col2im(dflat.reshape(n, ic, kh, kw, ho, wo), x_shape, stride, padding)
        db = gl.sum(axis=(0, 2)) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", out, inputs, bw)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel spatial convolution. weight: (c, 1, kh, kw), bias: (c,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    _check_conv_args("depthwise_conv2d", x, weight, stride, padding)
    if weight.shape[1] != 1 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"depthwise_conv2d: weight must be (C, 1, kh, kw) with C matching "
            f"input channels; input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"depthwise_conv2d: bias shape {bias.shape} != ({weight.shape[0]},)")

    n, c, _, _ = x.shape
    kh, kw = weight.shape[2], weight.shape[3]
    cols = _im2col(x.data, kh, kw, stride, padding)
    ho, wo = cols.shape[4], cols.shape[5]
    flat = cols.reshape(n, c, kh * kw, ho * wo)
    wf = weight.data.reshape(c, kh * kw)
    out = np.einsum("nckl,ck->ncl", flat, wf).reshape(n, c, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    x_shape = x.shape

    def bw(g):
        gl = g.reshape(n, c, ho * wo)
        dw = np.einsum("ncl,nckl->ck", gl, flat).reshape(weight.shape)
        dflat = np.einsum("ck,ncl->nckl", wf, gl)
        dx = _col2im(dflat.reshape(n, c, kh, kw, ho, wo), x_shape, stride, padding)
        db = gl.sum(axis=(0, 2)) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("depthwise_conv2d", out, inputs, bw)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Fully connected layer. x: (N, F), weight: (F, O), bias: (O,)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(
            f"dense: expected 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense: input features {x.shape[1]} != weight rows {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")

    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data[None, :]
    xd, wd = x.data, weight.data

    def bw(g):
        dx = g @ wd.T
        dw = xd.T @ g
        db = g.sum(axis=0) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("dense", out, inputs, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) mean over the spatial grid."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).astype(
            g.dtype, copy=False),)

    return _record("global_avg_pool", out, (x,), bw)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every pixel ``factor`` times along each spatial axis."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_nearest: input must be NCHW, got {x.shape}")
    if not isinstance(factor, int) or factor < 1:
        raise ShapeError(f"upsample_nearest: factor must be a positive int, got {factor!r}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _record("upsample_nearest", out, (x,), bw)


def batchnorm_inference_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel learnable affine y = gamma * x + beta, running stats frozen."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"batchnorm_inference_affine: input must be NCHW, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batchnorm_inference_affine: gamma/beta must have shape ({c},), "
            f"got {gamma.shape} and {beta.shape}")
    out = x.data * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    xd, gd = x.data, gamma.data

    def bw(g):
        dx = g * gd[None, :, None, None]
        dgamma = (g * xd).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        return dx, dgamma, dbeta

    return _record("batchnorm_inference_affine", out, (x, gamma, beta), bw)


_OP_TABLE = {
    "conv2d": conv2d,
    "depthwise_conv2d": depthwise_conv2d,
    "dense": dense,
    "relu": relu,
    "hardswish": hardswish,
    "sigmoid": sigmoid,
    "global_avg_pool": global_avg_pool,
    "upsample_nearest": upsample_nearest,
    "batchnorm_inference_affine": batchnorm_inference_affine,
    "add": add,
    "concat": concat,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch a layer op by name; see _OP_TABLE for the supported set."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(
            f"unknown op kind {kind!r}; supported: {sorted(_OP_TABLE)}") from None
    if kind == "concat":
        return fn(inputs, **params)
    return fn(*inputs, **params)
