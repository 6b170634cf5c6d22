"""Layer-level differentiable operations.

Convolution runs as an im2col gather plus one matrix multiply;
``conv2d_reference`` keeps the naive six-loop version around as an
independent oracle. No layer carries a bias term.
"""

from __future__ import annotations

import numpy as np

from .errors import GeometryError, InputError, LabelError, ShapeError
from .tensor import Tensor, _result, accumulate_grad


# -- convolution --------------------------------------------------------------

def _conv_out_size(h, w, kh, kw, stride, pad):
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return oh, ow


def _im2col(x, kh, kw, stride, pad, oh, ow):
    """Patch gather in (C*kh*kw, N*OH*OW) layout.

    This layout makes the convolution (and both its backward products) a
    single flat GEMM; only the small output tensor ever gets transposed.
    """
    n, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    xt = x.transpose(1, 0, 2, 3)
    col = np.empty((c, kh, kw, n, oh, ow), dtype=x.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            col[:, i, j] = xt[:, :, i:i_max:stride, j:j_max:stride]
    return col.reshape(c * kh * kw, n * oh * ow)


def _col2im(col, x_shape, kh, kw, stride, pad, oh, ow):
    n, c, h, w = x_shape
    col = col.reshape(c, kh, kw, n, oh, ow)
    img = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=col.dtype)
    for i in range(kh):
        i_max = i + stride * oh
        for j in range(kw):
            j_max = j + stride * ow
            img[:, :, i:i_max:stride, j:j_max:stride] += col[:, i, j]
    if pad > 0:
        img = img[:, :, pad:h + pad, pad:w + pad]
    return np.ascontiguousarray(img.transpose(1, 0, 2, 3))


def conv2d(x, weight, stride=1, pad=0):
    """Cross-correlation of NCHW input with OIKK weight, no bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d: need 4-d input and weight, got {x.data.shape} and {weight.data.shape}")
    n, c, h, w = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if c != ci:
        raise ShapeError(f"conv2d: input channels {c} != weight channels {ci}")
    if stride < 1 or pad < 0:
        raise GeometryError(f"conv2d: stride {stride} must be >= 1 and pad {pad} >= 0")
    oh, ow = _conv_out_size(h, w, kh, kw, stride, pad)
    if oh <= 0 or ow <= 0:
        raise GeometryError(f"conv2d: nonpositive output dims ({oh}, {ow})")

    col = _im2col(x.data, kh, kw, stride, pad, oh, ow)
    w2 = weight.data.reshape(o, -1)
    out = np.ascontiguousarray(
        (w2 @ col).reshape(o, n, oh, ow).transpose(1, 0, 2, 3))

    def backward_fn(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, n * oh * ow)
        if weight.requires_grad:
            accumulate_grad(weight, (g2 @ col.T).reshape(weight.data.shape))
        if x.requires_grad:
            dcol = w2.T @ g2
            accumulate_grad(x, _col2im(dcol, x.data.shape, kh, kw, stride, pad, oh, ow))

    return _result(out, (x, weight), backward_fn)


def conv2d_reference(x, weight, stride=1, pad=0):
    """Naive direct convolution on raw arrays; the test oracle for conv2d."""
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    oh, ow = _conv_out_size(h, w, kh, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad > 0 else x
    out = np.zeros((n, o, oh, ow), dtype=np.promote_types(x.dtype, np.float64))
    for ni in range(n):
        for oi in range(o):
            for yi in range(oh):
                for xi in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[ni, ci, yi * stride + ki, xi * stride + kj] * weight[oi, ci, ki, kj]
                    out[ni, oi, yi, xi] = acc
    return out.astype(x.dtype)


# -- batch normalization -------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               momentum=0.1, eps=1e-5):
    """Per-channel batch norm over an NCHW tensor.

    Train mode normalizes by batch statistics and folds them into the running
    buffers (which are plain arrays, mutated in place); eval mode uses the
    running buffers. Differentiable w.r.t. x, gamma and beta.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"batch_norm: need 4-d input, got {x.data.shape}")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    if eps <= 0:
        raise InputError("batch_norm: eps must be positive")
    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    if training and m == 0:
        raise InputError("batch_norm: zero-size batch in train mode")

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean.astype(x.data.dtype)
        var = running_var.astype(x.data.dtype)

    ivar = 1.0 / np.sqrt(var + eps)
    xc = x.data - mu[None, :, None, None]
    xhat = xc * ivar[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward_fn(g):
        accumulate_grad(beta, g.sum(axis=(0, 2, 3)))
        accumulate_grad(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * ivar ** 3
            dmu = -(dxhat.sum(axis=(0, 2, 3))) * ivar + dvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3))
            dx = (dxhat * ivar[None, :, None, None]
                  + dvar[None, :, None, None] * 2.0 * xc / m
                  + dmu[None, :, None, None] / m)
        else:
            dx = dxhat * ivar[None, :, None, None]
        accumulate_grad(x, dx)

    return _result(out, (x, gamma, beta), backward_fn)


# -- linear / pooling ----------------------------------------------------------

def linear(x, weight):
    """x (N,F) times weight (O,F) transposed; no bias."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.data.shape} and {weight.data.shape}")

    def backward_fn(g):
        accumulate_grad(x, g @ weight.data)
        accumulate_grad(weight, g.T @ x.data)

    return _result(x.data @ weight.data.T, (x, weight), backward_fn)


def global_avg_pool(x):
    """Mean over the spatial dims: (N,C,H,W) -> (N,C)."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: need 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape

    def backward_fn(g):
        accumulate_grad(x, np.broadcast_to(g[:, :, None, None], x.data.shape) / (h * w))

    return _result(x.data.mean(axis=(2, 3)), (x,), backward_fn)


def downsample_pad(x, out_channels, stride):
    """Parameter-free shortcut: stride-subsample and zero-pad channels.

    Carries the ``from_quantizer`` tag of its input so skip-path provenance
    stays traceable.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"downsample_pad: need 4-d input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if out_channels < c:
        raise ShapeError(f"downsample_pad: cannot shrink channels {c} -> {out_channels}")
    sub = x.data[:, :, ::stride, ::stride]
    out = np.zeros((n, out_channels) + sub.shape[2:], dtype=x.data.dtype)
    out[:, :c] = sub

    def backward_fn(g):
        dx = np.zeros_like(x.data)
        dx[:, :, ::stride, ::stride] = g[:, :c]
        accumulate_grad(x, dx)

    res = _result(out, (x,), backward_fn)
    res.from_quantizer = x.from_quantizer
    return res


# -- classification losses ------------------------------------------------------

def softmax(logits):
    """Row-wise softmax of an (N,C) tensor, numerically stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax: need 2-d logits, got {logits.data.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward_fn(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        accumulate_grad(logits, p * (g - inner))

    return _result(p, (logits,), backward_fn)


def softmax_cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: need 2-d logits, got {logits.data.shape}")
    labels = np.asarray(labels)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({n},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"softmax_cross_entropy: labels must lie in [0, {c})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = np.asarray(-logp[np.arange(n), labels].mean())

    def backward_fn(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        accumulate_grad(logits, p * (g / n))

    return _result(loss, (logits,), backward_fn)
