"""Forward/backward pairs for the layer primitives.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
``(dout, cache)`` and returns the input gradient plus any parameter gradients.
Grouped operators compute each group with its own matrix product, so values in
one group never depend on another group's data or weights.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


# -- convolution --------------------------------------------------------------


def _im2col(x, K, stride, pad, g0):
    N, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (K, K), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    Cg = C // g0
    cols = win.reshape(N, g0, Cg, Ho, Wo, K, K).transpose(0, 1, 3, 4, 2, 5, 6)
    return cols.reshape(N, g0, Ho * Wo, Cg * K * K), (Ho, Wo), xp.shape


def conv2d_forward(x, w, b=None, stride=1, groups=1, replicate=1):
    """Grouped 2-D convolution with 'same'-style padding K//2.

    ``w`` has shape ``(C_out, C_in_total / groups, K, K)`` where ``C_in_total =
    x.shape[1] * replicate``: the input is logically tiled ``replicate`` times
    before the grouped convolution. The tiling is never materialized.
    """
    N, Cx, H, W = x.shape
    C_out, Cg, K, _ = w.shape
    if groups % replicate:
        raise ValueError("groups must be a multiple of replicate")
    g0 = groups // replicate
    if Cx % g0 or Cx // g0 != Cg or C_out % groups:
        raise ValueError(f"conv shape mismatch: x{x.shape} w{w.shape} groups={groups} replicate={replicate}")
    pad = K // 2
    cols, (Ho, Wo), xp_shape = _im2col(x, K, stride, pad, g0)
    Og = C_out // groups
    wm = w.reshape(replicate, g0, Og, Cg * K * K)
    # (N,1,g0,P,k) @ (R,g0,k,Og) -> (N,R,g0,P,Og)
    out = np.matmul(cols[:, None], wm.transpose(0, 1, 3, 2))
    out = out.reshape(N, groups, Ho, Wo, Og).transpose(0, 1, 4, 2, 3).reshape(N, C_out, Ho, Wo)
    if b is not None:
        out = out + b[None, :, None, None]
    cache = (cols, wm, x.shape, xp_shape, (K, stride, pad, groups, replicate, Ho, Wo), b is not None)
    return out, cache


def conv2d_backward(dout, cache):
    cols, wm, x_shape, xp_shape, (K, stride, pad, groups, R, Ho, Wo), has_b = cache
    N, Cx, H, W = x_shape
    g0 = groups // R
    Og = wm.shape[2]
    C_out = groups * Og
    db = dout.sum(axis=(0, 2, 3)) if has_b else None
    d = dout.reshape(N, groups, Og, Ho * Wo).transpose(0, 1, 3, 2).reshape(N, R, g0, Ho * Wo, Og)
    # weight: sum_n cols^T @ d  -> (R,g0,k,Og)
    dwm = np.matmul(cols[:, None].transpose(0, 1, 2, 4, 3), d).sum(axis=0)
    dw = dwm.transpose(0, 1, 3, 2).reshape(C_out, -1, K, K)
    dcols = np.matmul(d, wm).sum(axis=1)  # (N,g0,P,k)
    Cg = Cx // g0
    dwin = dcols.reshape(N, g0, Ho, Wo, Cg, K, K).transpose(0, 1, 4, 5, 6, 2, 3).reshape(N, Cx, K, K, Ho, Wo)
    dxp = np.zeros(xp_shape, dtype=dout.dtype)
    hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    for i in range(K):
        for j in range(K):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dwin[:, :, i, j]
    dx = dxp[:, :, pad:pad + H, pad:pad + W] if pad else dxp
    return dx, dw, db


# -- dense ---------------------------------------------------------------------


def dense_forward(x, w, b=None, groups=1):
    """Grouped fully connected layer; ``w`` is ``(C_out, C_in / groups)``."""
    N, C_in = x.shape
    C_out, Cg = w.shape
    if C_in != Cg * groups or C_out % groups:
        raise ValueError(f"dense shape mismatch: x{x.shape} w{w.shape} groups={groups}")
    Og = C_out // groups
    xg = x.reshape(N, groups, Cg).transpose(1, 0, 2)  # (G,N,Cg)
    wg = w.reshape(groups, Og, Cg)
    out = np.matmul(xg, wg.transpose(0, 2, 1)).transpose(1, 0, 2).reshape(N, C_out)
    if b is not None:
        out = out + b
    return out, (xg, wg, b is not None)


def dense_backward(dout, cache):
    xg, wg, has_b = cache
    G, N, Cg = xg.shape
    Og = wg.shape[1]
    db = dout.sum(axis=0) if has_b else None
    dg = dout.reshape(N, G, Og).transpose(1, 0, 2)  # (G,N,Og)
    dw = np.matmul(dg.transpose(0, 2, 1), xg).reshape(G * Og, Cg)
    dx = np.matmul(dg, wg).transpose(1, 0, 2).reshape(N, G * Cg)
    return dx, dw, db


# -- normalization -------------------------------------------------------------


def _norm_view(x, stat_groups):
    N, C = x.shape[:2]
    return x.reshape(N, stat_groups, C // stat_groups, -1)


def norm_forward(x, gamma, beta, running_mean, running_var, stat_groups, train, momentum=NORM_MOMENTUM):
    """Batch normalization with one statistic per block of ``C / stat_groups`` channels.

    ``stat_groups == C`` is ordinary per-channel batch norm. In train mode the
    running buffers are updated in place.
    """
    N, C = x.shape[:2]
    shape = (1, C) + (1,) * (x.ndim - 2)
    xv = _norm_view(x, stat_groups)
    if train:
        mean = xv.mean(axis=(0, 2, 3))
        var = xv.var(axis=(0, 2, 3))
        n = xv.size // stat_groups
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (xv - mean[None, :, None, None]) * inv_std[None, :, None, None]
    xhat = xhat.reshape(x.shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, (xhat, gamma, inv_std, stat_groups, train)


def norm_backward(dout, cache):
    xhat, gamma, inv_std, S, train = cache
    C = dout.shape[1]
    axes = (0,) + tuple(range(2, dout.ndim))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    shape = (1, C) + (1,) * (dout.ndim - 2)
    dxhat = _norm_view(dout * gamma.reshape(shape), S)
    istd = inv_std[None, :, None, None]
    if train:
        xh = _norm_view(xhat, S)
        m1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        m2 = (dxhat * xh).mean(axis=(0, 2, 3), keepdims=True)
        dx = istd * (dxhat - m1 - xh * m2)
    else:
        dx = istd * dxhat
    return dx.reshape(dout.shape), dgamma, dbeta


# -- elementwise / pooling -----------------------------------------------------


def relu_forward(x):
    # np.maximum keeps NaN, so a diverging run surfaces in the loss
    return np.maximum(x, 0).astype(x.dtype, copy=False), x > 0


def relu_backward(dout, mask):
    return np.where(mask, dout, 0).astype(dout.dtype, copy=False)


def maxpool_forward(x, k):
    """Non-overlapping k x k max pooling (H and W must be multiples of k)."""
    N, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    win = x.reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, k * k)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape, k)


def maxpool_backward(dout, cache):
    idx, x_shape, k = cache
    N, C, H, W = x_shape
    Ho, Wo = H // k, W // k
    dwin = np.zeros((N, C, Ho, Wo, k * k), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(N, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def global_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_pool_backward(dout, x_shape):
    N, C, H, W = x_shape
    return np.broadcast_to((dout / (H * W))[:, :, None, None], x_shape).copy()


# -- aggregation and loss ------------------------------------------------------


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def aggregate_forward(x, M, mode="logit"):
    """Average M path outputs packed as ``(N, M * classes)``.

    ``mode="logit"`` returns the mean logit vector. ``mode="prob"`` returns the
    log of the mean softmax probability, so a downstream softmax cross-entropy
    equals the negative log of the averaged probability.
    """
    N = x.shape[0]
    paths = x.reshape(N, M, -1)
    if mode == "logit":
        return paths.mean(axis=1), (mode, M, None, None)
    if mode == "prob":
        p = _softmax(paths, axis=2)
        pbar = p.mean(axis=1)
        return np.log(pbar), (mode, M, p, pbar)
    raise ValueError(f"unknown aggregation mode {mode!r}")


def aggregate_backward(dout, cache):
    mode, M, p, pbar = cache
    N, C = dout.shape
    if mode == "logit":
        return np.broadcast_to((dout / M)[:, None, :], (N, M, C)).reshape(N, M * C).copy()
    dp = (dout / pbar / M)[:, None, :]
    dy = p * (dp - (dp * p).sum(axis=2, keepdims=True))
    return dy.reshape(N, M * C)


class LabelError(ValueError):
    pass


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy over the batch; returns ``(loss, dlogits)``."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    N, C = logits.shape
    if labels.shape != (N,):
        raise LabelError(f"expected {N} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(N)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = _softmax(logits, axis=1)
    grad[rows, labels] -= 1
    return loss, grad / N
