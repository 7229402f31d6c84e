"""Neural-network operations built on the autodiff core.

Convolution and max pooling are primitives with hand-written backward
closures (im2col + one BLAS matmul for conv); batch norm and the dense layer
are compositions of primitives, so their gradients come for free. Image
tensors are NCHW throughout.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import GraphError, Tensor, _record

TRAIN = "train"
EVAL = "eval"

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
LEAKY_SLOPE = 0.2


def _check_mode(mode):
    if mode != TRAIN and mode != EVAL:
        raise ValueError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")


def same_padding(extent, kernel, stride):
    """Total padding so that output extent = ceil(extent / stride).

    The extra pixel for odd totals goes after the data (bottom/right), the
    convention the reference checkpoints assume.
    """
    out = math.ceil(extent / stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    before = total // 2
    return out, before, total - before


def conv2d(x, kernel, stride=1, padding="same"):
    """2-d cross-correlation. x: (N,C,H,W), kernel: (F,C,KH,KW) -> (N,F,OH,OW).

    Lowered to a matrix product: windows are gathered into a (N*OH*OW,
    C*KH*KW) matrix once and reused by both gradient halves. The input
    gradient scatters window columns back with KH*KW strided slice-adds.
    """
    if x.data.ndim != 4:
        raise GraphError(f"conv2d input must be 4-d NCHW, got shape {x.data.shape}")
    if kernel.data.ndim != 4:
        raise GraphError(f"conv2d kernel must be 4-d FCHW, got shape {kernel.data.shape}")
    n, c, h, w = x.data.shape
    f, kc, kh, kw = kernel.data.shape
    if kc != c:
        raise GraphError(f"kernel expects {kc} input channels, tensor has {c}")
    if min(n, c, h, w, f, kh, kw) <= 0:
        raise GraphError("conv2d operand has a zero-sized extent")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")

    if padding == "same":
        oh, pt, pb = same_padding(h, kh, stride)
        ow, pl, pr = same_padding(w, kw, stride)
    elif padding == "valid":
        if h < kh or w < kw:
            raise GraphError(f"valid conv needs input >= kernel, got {h}x{w} vs {kh}x{kw}")
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")

    xp = x.data
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((0, 0), (0, 0), (pt, pb), (pl, pr)))

    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    cols = cols.reshape(n * oh * ow, c * kh * kw)
    wmat = kernel.data.reshape(f, c * kh * kw)
    y = (cols @ wmat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    out = Tensor(np.ascontiguousarray(y))

    def grad_fn(g, needs, x=x, kernel=kernel):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
        gk = (gm.T @ cols).reshape(kernel.data.shape) if needs[1] else None
        gx = None
        if needs[0]:
            dcols = (gm @ wmat).reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[
                        :, :, i : i + (oh - 1) * stride + 1 : stride,
                        j : j + (ow - 1) * stride + 1 : stride,
                    ] += dcols[:, :, :, :, i, j]
            gx = dxp[:, :, pt : pt + h, pl : pl + w]
            if not gx.flags.c_contiguous:
                gx = np.ascontiguousarray(gx)
        return (gx, gk)

    return _record(out, (x, kernel), grad_fn)


def max_pool2d(x, size):
    """Non-overlapping max pooling; extents must divide evenly by `size`.

    Ties inside a window route the whole gradient to the first maximum in
    row-major order, so backward is deterministic.
    """
    if x.data.ndim != 4:
        raise GraphError(f"max_pool2d input must be 4-d NCHW, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if size < 1:
        raise ValueError(f"pool size must be >= 1, got {size}")
    if h % size or w % size:
        raise GraphError(f"pool size {size} does not divide input extent {h}x{w}")
    oh, ow = h // size, w // size
    win = x.data.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, oh, ow, size * size)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])

    def grad_fn(g, needs):
        dwin = np.zeros((n, c, oh, ow, size * size), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        gx = dwin.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _record(out, (x,), grad_fn)


def fully_connected(x, weight, bias=None):
    """x @ weight + bias for (N,D) inputs; composition of primitives."""
    if x.data.ndim != 2:
        raise GraphError(f"fully_connected input must be 2-d, got shape {x.data.shape}")
    if weight.data.ndim != 2 or x.data.shape[1] != weight.data.shape[0]:
        raise GraphError(
            f"fully_connected shapes incompatible: {x.data.shape} @ {weight.data.shape}"
        )
    out = x @ weight
    if bias is not None:
        if bias.data.shape != (weight.data.shape[1],):
            raise GraphError(
                f"bias shape {bias.data.shape} does not match {weight.data.shape[1]} units"
            )
        out = out + bias
    return out


def flatten(x):
    return x.reshape((x.data.shape[0], -1))


def batch_norm(x, scale, offset, running_mean, running_var, mode,
               momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over (N,) or (N,H,W) per channel.

    Train mode normalizes with biased batch statistics and folds them into
    the running buffers in place (buffers are plain arrays, not Parameters).
    Eval mode uses the buffers as constants. Built from recorded primitives,
    so the exact gradient through the batch statistics comes for free.
    """
    _check_mode(mode)
    if x.data.ndim == 4:
        axes = (0, 2, 3)
        channels = x.data.shape[1]
        bshape = (1, channels, 1, 1)
    elif x.data.ndim == 2:
        axes = (0,)
        channels = x.data.shape[1]
        bshape = (1, channels)
    else:
        raise GraphError(f"batch_norm expects 2-d or 4-d input, got {x.data.shape}")
    if scale.data.shape != (channels,) or offset.data.shape != (channels,):
        raise GraphError(
            f"batch_norm parameters must have shape ({channels},), got "
            f"{scale.data.shape} and {offset.data.shape}"
        )
    if running_mean.shape != (channels,) or running_var.shape != (channels,):
        raise GraphError("running statistic buffers do not match channel count")

    if mode == TRAIN:
        if x.data.shape[0] < 2:
            raise GraphError("batch_norm in train mode needs batch size >= 2")
        mean = x.mean(axis=axes, keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean.data.reshape(channels)
        running_var *= momentum
        running_var += (1.0 - momentum) * var.data.reshape(channels)
        normed = centered / (var + eps).sqrt()
    else:
        mu = running_mean.reshape(bshape).astype(x.data.dtype)
        sd = np.sqrt(running_var.reshape(bshape) + eps).astype(x.data.dtype)
        normed = (x - Tensor(mu)) / Tensor(sd)
    return normed * scale.reshape(bshape) + offset.reshape(bshape)


# ---- activations ---------------------------------------------------------


def relu(x):
    out = Tensor(np.maximum(x.data, 0))

    def grad_fn(g, needs, mask=x.data > 0):
        return (g * mask,)

    return _record(out, (x,), grad_fn)


def leaky_relu(x, slope=LEAKY_SLOPE):
    out = Tensor(np.where(x.data > 0, x.data, x.data * slope))

    def grad_fn(g, needs, x=x.data):
        return (g * np.where(x > 0, 1.0, slope).astype(g.dtype),)

    return _record(out, (x,), grad_fn)


def tanh(x):
    out = Tensor(np.tanh(x.data))

    def grad_fn(g, needs, y=out.data):
        return (g * (1.0 - y * y),)

    return _record(out, (x,), grad_fn)


def sigmoid(x):
    # exp of the negated magnitude keeps both tails from overflowing
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(y.astype(d.dtype))

    def grad_fn(g, needs, y=out.data):
        return (g * y * (1.0 - y),)

    return _record(out, (x,), grad_fn)


_ACTIVATIONS = {
    "relu": relu,
    "lrelu": leaky_relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
}


def pointwise_activation(x, kind):
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; one of {sorted(_ACTIVATIONS)}")
    return fn(x)


# ---- classification head --------------------------------------------------


def softmax(x, axis=1):
    """Row-stable softmax (shift by the detached row max)."""
    shifted = x - Tensor(x.data.max(axis=axis, keepdims=True))
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits, onehot):
    """Mean cross-entropy between softmax(logits) and onehot targets.

    Fused primitive: forward runs log-sum-exp once, backward is
    (softmax - onehot) / N. Target rows must sum to one.
    """
    y = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot)
    if logits.data.ndim != 2:
        raise GraphError(f"logits must be 2-d, got shape {logits.data.shape}")
    if y.shape != logits.data.shape:
        raise GraphError(
            f"targets shape {y.shape} does not match logits {logits.data.shape}"
        )
    row_sums = y.sum(axis=1)
    if not np.allclose(row_sums, 1.0, atol=1e-4):
        raise GraphError("onehot target rows must sum to 1")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.data.shape[0]
    out = Tensor(np.asarray(-(y * logp).sum() / n, dtype=logits.data.dtype))
    parents = (logits, onehot) if isinstance(onehot, Tensor) else (logits,)

    def grad_fn(g, needs, p=np.exp(logp), y=y, n=n, logp=logp):
        gl = (p - y) * (g / n) if needs[0] else None
        if len(needs) == 1:
            return (gl,)
        gy = -logp * (g / n) if needs[1] else None
        return (gl, gy)

    return _record(out, parents, grad_fn)


# ---- stochastic regularizers ----------------------------------------------


def dropout(x, keep, rng, mode):
    """Inverted dropout: kept units are scaled by 1/keep so eval is identity."""
    if not 0.0 < keep <= 1.0:
        raise ValueError(f"dropout keep probability must be in (0, 1], got {keep}")
    _check_mode(mode)
    if mode == EVAL or keep == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    mask = (rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
    out = Tensor(x.data * mask)

    def grad_fn(g, needs):
        return (g * mask,)

    return _record(out, (x,), grad_fn)


def gaussian_noise(x, stddev, rng, mode):
    """Additive zero-mean Gaussian noise in train mode; identity in eval."""
    if stddev < 0:
        raise ValueError(f"noise stddev must be >= 0, got {stddev}")
    _check_mode(mode)
    if mode == EVAL or stddev == 0.0:
        return x
    if rng is None:
        raise ValueError("gaussian_noise in train mode needs an rng")
    return x + Tensor(rng.normal(0.0, stddev, x.data.shape).astype(x.data.dtype))


def stochastic_regularizers(x, dropout_keep, noise_stddev, rng, mode):
    """Noise first, then dropout; the mean activation is preserved."""
    return dropout(gaussian_noise(x, noise_stddev, rng, mode), dropout_keep, rng, mode)
