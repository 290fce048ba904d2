"""Layer primitives with explicit forward caches and exact backward passes.

Tensors are laid out (batch, channels, time). Every ``*_forward`` returns
``(out, cache)``; the matching ``*_backward`` takes the upstream gradient and
that cache and returns the input gradient plus parameter gradients.
"""

from __future__ import annotations

import numpy as np


def _shifted(xp: np.ndarray, k: int, stride: int, n_out: int) -> np.ndarray:
    return xp[:, :, k : k + stride * (n_out - 1) + 1 : stride]


def _rowwise(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Row-by-row x @ w, so each sample's result is independent of batch size.

    A single 2-D matmul lets BLAS pick a blocking that depends on the number
    of rows, which changes float rounding between batch sizes.
    """
    return np.matmul(x[:, None, :], w)[:, 0, :]


def _out_len(n: int, kernel: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def conv1d_forward(x, w, stride=1, pad=0):
    """Dense convolution; w has shape (out, in, kernel)."""
    out_ch, _, kernel = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    n_out = _out_len(x.shape[2], kernel, stride, pad)
    out = np.zeros((x.shape[0], out_ch, n_out), dtype=x.dtype)
    for k in range(kernel):
        out += np.matmul(w[:, :, k], _shifted(xp, k, stride, n_out))
    return out, (xp, w, stride, pad, x.shape)


def conv1d_backward(dout, cache, need_dx=True):
    xp, w, stride, pad, x_shape = cache
    kernel = w.shape[2]
    n_out = dout.shape[2]
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for k in range(kernel):
        xs = _shifted(xp, k, stride, n_out)
        dw[:, :, k] = np.tensordot(dout, xs, axes=([0, 2], [0, 2]))
        if need_dx:
            dxp[:, :, k : k + stride * (n_out - 1) + 1 : stride] += np.matmul(w[:, :, k].T, dout)
    dx = None
    if need_dx:
        dx = dxp[:, :, pad : pad + x_shape[2]] if pad else dxp
    return dx, dw


def depthwise_forward(x, w, stride=1, pad=0):
    """Per-channel convolution; w has shape (channels, 1, kernel)."""
    kernel = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    n_out = _out_len(x.shape[2], kernel, stride, pad)
    out = np.zeros((x.shape[0], x.shape[1], n_out), dtype=x.dtype)
    for k in range(kernel):
        out += w[None, :, 0, k, None] * _shifted(xp, k, stride, n_out)
    return out, (xp, w, stride, pad, x.shape)


def depthwise_backward(dout, cache, need_dx=True):
    xp, w, stride, pad, x_shape = cache
    kernel = w.shape[2]
    n_out = dout.shape[2]
    dw = np.empty_like(w)
    dxp = np.zeros_like(xp) if need_dx else None
    for k in range(kernel):
        xs = _shifted(xp, k, stride, n_out)
        dw[:, 0, k] = np.einsum("bcl,bcl->c", dout, xs)
        if need_dx:
            dxp[:, :, k : k + stride * (n_out - 1) + 1 : stride] += w[None, :, 0, k, None] * dout
    dx = None
    if need_dx:
        dx = dxp[:, :, pad : pad + x_shape[2]] if pad else dxp
    return dx, dw


def pointwise_forward(x, w):
    """1x1 convolution; w has shape (out, in)."""
    return np.matmul(w, x), (x, w)


def pointwise_backward(dout, cache, need_dx=True):
    x, w = cache
    dw = np.tensordot(dout, x, axes=([0, 2], [0, 2]))
    dx = np.matmul(w.T, dout) if need_dx else None
    return dx, dw


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5, update_stats=True):
    """Per-channel BN over (batch, time).

    In train mode the batch statistics normalize the input and, if
    `update_stats`, are blended into the running buffers in place with
    ``run = (1 - momentum) * run + momentum * batch``. Variances use the
    population convention throughout.
    """
    if train:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        if update_stats:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    out = gamma[None, :, None] * xhat + beta[None, :, None]
    return out, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = np.einsum("bcl,bcl->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 2))
    dxhat = dout * gamma[None, :, None]
    if train:
        n = dout.shape[0] * dout.shape[2]
        sum_dxhat = dxhat.sum(axis=(0, 2))
        sum_dxhat_xhat = np.einsum("bcl,bcl->c", dxhat, xhat)
        dx = (inv_std / n)[None, :, None] * (
            n * dxhat - sum_dxhat[None, :, None] - xhat * sum_dxhat_xhat[None, :, None]
        )
    else:
        dx = dxhat * inv_std[None, :, None]
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def se_forward(x, w1, b1, w2, b2):
    """Squeeze-and-excitation: mean over time, bottleneck MLP, sigmoid gate."""
    z = x.mean(axis=2)
    h_pre = _rowwise(z, w1.T) + b1
    h = np.maximum(h_pre, 0)
    s = sigmoid(_rowwise(h, w2.T) + b2)
    out = x * s[:, :, None]
    return out, (x, z, h_pre, h, s, w1, w2)


def se_backward(dout, cache):
    x, z, h_pre, h, s, w1, w2 = cache
    ds = np.einsum("bcl,bcl->bc", dout, x)
    da = ds * s * (1.0 - s)
    dw2 = da.T @ h
    db2 = da.sum(axis=0)
    dh = (da @ w2) * (h_pre > 0)
    dw1 = dh.T @ z
    db1 = dh.sum(axis=0)
    dz = dh @ w1
    dx = dout * s[:, :, None] + dz[:, :, None] / x.shape[2]
    return dx, {"w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_pool_forward(x, w):
    """Linear score per timestep, softmax over time, weighted sum of features."""
    scores = np.einsum("c,bcl->bl", w, x)
    a = softmax(scores, axis=1)
    pooled = np.einsum("bl,bcl->bc", a, x)
    return pooled, (x, a, w)


def attention_pool_backward(dpooled, cache):
    x, a, w = cache
    da = np.einsum("bc,bcl->bl", dpooled, x)
    dscores = a * (da - (a * da).sum(axis=1, keepdims=True))
    dw = np.einsum("bl,bcl->c", dscores, x)
    dx = a[:, None, :] * dpooled[:, :, None] + w[None, :, None] * dscores[:, None, :]
    return dx, dw


def linear_forward(x, w, b):
    """x (batch, in) @ w (in, out) + b."""
    return _rowwise(x, w) + b, (x, w)


def linear_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)
