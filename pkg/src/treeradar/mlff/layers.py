"""Array primitives with hand-written backward passes.

Activations are NCHW float arrays.  Every ``*_forward`` returns the output
and a cache; the matching ``*_backward`` maps the output gradient back to
input (and parameter) gradients.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from treeradar.core import bilinear_matrix

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_CLAMP = 1e-7


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b=None, stride: int = 1, pad: int = 0):
    """Cross-correlation of x (N,C,H,W) with kernels w (F,C,kh,kw)."""
    n, c, h, wd = x.shape
    f, c2, kh, kw = w.shape
    if c != c2:
        raise ValueError(f"input has {c} channels, kernel expects {c2}")
    ho, wo = conv_out_size(h, kh, stride, pad), conv_out_size(wd, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ValueError(f"input {h}x{wd} too small for kernel {kh}x{kw}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, :(ho - 1) * stride + 1:stride, :(wo - 1) * stride + 1:stride]
    y = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        y = y + b[None, :, None, None]
    return np.ascontiguousarray(y), (x.shape, xp.shape, win, w, stride, pad, b is not None)


def conv2d_backward(dy, cache):
    x_shape, xp_shape, win, w, stride, pad, has_bias = cache
    _, _, kh, kw = w.shape
    ho, wo = dy.shape[2], dy.shape[3]
    dw = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))
    dcols = np.tensordot(dy, w, axes=([1], [0]))  # (N,Ho,Wo,C,kh,kw)
    dxp = np.zeros(xp_shape)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + (ho - 1) * stride + 1:stride, j:j + (wo - 1) * stride + 1:stride] += \
                dcols[..., i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad:pad + x_shape[2], pad:pad + x_shape[3]] if pad else dxp
    db = dy.sum(axis=(0, 2, 3)) if has_bias else None
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool,
                      momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Per-channel normalization over (N, H, W).

    Returns ``(y, cache, (new_running_mean, new_running_var))``; the running
    statistics are unchanged in eval mode.
    """
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] < 2 and m < 2:
            raise ValueError("train-mode batch norm needs more than one value per channel")
        mu = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        new_stats = ((1 - momentum) * running_mean + momentum * mu,
                     (1 - momentum) * running_var + momentum * unbiased)
    else:
        mu, var = running_mean, running_var
        new_stats = (running_mean, running_var)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    return y, (xhat, inv_std, gamma, train), new_stats


def batchnorm_backward(dy, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    dxhat = dy * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
    dx = inv_std[None, :, None, None] / m * (m * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ValueError("max pooling needs at least 2x2 inputs")
    blocks = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, (x.shape, idx)


def maxpool2x2_backward(dy, cache):
    x_shape, idx = cache
    n, c, ho, wo = dy.shape
    blocks = np.zeros((n, c, ho, wo, 4))
    np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dx = np.zeros(x_shape)
    dx[:, :, :2 * ho, :2 * wo] = blocks.reshape(n, c, 2 * ho, 2 * wo)
    return dx


def upsample_forward(x, out_hw):
    """Corner-aligned bilinear resize of the two spatial axes."""
    uh = bilinear_matrix(x.shape[2], out_hw[0])
    uw = bilinear_matrix(x.shape[3], out_hw[1])
    y = np.einsum("hi,ncij,wj->nchw", uh, x, uw, optimize=True)
    return y, (uh, uw)


def upsample_backward(dy, cache):
    uh, uw = cache
    return np.einsum("hi,nchw,wj->ncij", uh, dy, uw, optimize=True)


def concat_forward(xs):
    return np.concatenate(xs, axis=1), [x.shape[1] for x in xs]


def concat_backward(dy, sizes):
    return np.split(dy, np.cumsum(sizes)[:-1], axis=1)


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def linear_forward(x, w, b):
    """x (N, D) @ w.T (D -> K) + b."""
    return x @ w.T + b, x


def linear_backward(dy, x, w):
    return dy @ w, dy.T @ x, dy.sum(axis=0)


def bce_loss(p, label):
    """Binary cross-entropy of probabilities, clamped away from 0 and 1."""
    p = np.clip(np.asarray(p, dtype=float), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(label, dtype=float)
    return -(y * np.log(p) + (1.0 - y) * np.log1p(-p))


def bce_with_logits(z, label):
    """Mean BCE over a batch of logits and its gradient ``(p - y) / N``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    y = np.asarray(label, dtype=float).reshape(-1)
    # log(1 + exp(-|z|)) keeps large logits finite
    losses = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(losses.mean()), (sigmoid(z) - y) / z.size
