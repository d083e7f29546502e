"""Forward/backward pairs for the layer set used in training.

Tensors are channels-last (NHWC) and convolutions run at stride 1.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..activations import tanh_beta, tanh_beta_grad, tern_tanh, tern_tanh_grad


def conv_forward(x, w, padding=0, dilation=1, bias=None):
    """NHWC convolution as one GEMM per kernel tap.

    The zero-padded input is flattened to ``(B*Hp*Wp, C)`` rows. Tap
    ``(ky, kx)`` then reads a contiguous row range shifted by
    ``dilation * (ky * Wp + kx)``; positions beyond the valid output grid are
    computed and discarded, so no patch matrix is materialised.
    """
    b, _, _, cin = x.shape
    cout, _, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    hp, wp = x.shape[1], x.shape[2]
    oh, ow = hp - dilation * (kh - 1), wp - dilation * (kw - 1)
    flat = x.reshape(-1, cin)
    n = flat.shape[0] - dilation * ((kh - 1) * wp + (kw - 1))
    taps = np.ascontiguousarray(w.transpose(2, 3, 1, 0))  # (kh, kw, cin, cout)
    full = np.empty((b * hp * wp, cout), dtype=x.dtype)
    acc = full[:n]
    np.matmul(flat[:n], taps[0, 0], out=acc)
    tmp = np.empty_like(acc)
    for ky in range(kh):
        for kx in range(kw):
            if ky or kx:
                off = dilation * (ky * wp + kx)
                np.matmul(flat[off : off + n], taps[ky, kx], out=tmp)
                acc += tmp
    if bias is not None:
        acc += bias
    out = np.ascontiguousarray(full.reshape(b, hp, wp, cout)[:, :oh, :ow])
    return out, (flat, x.shape, taps, n, padding, dilation)


def conv_backward(g, cache):
    flat, padded_shape, taps, n, padding, dilation = cache
    b, hp, wp, cin = padded_shape
    kh, kw, _, cout = taps.shape
    oh, ow = g.shape[1], g.shape[2]
    g_full = np.zeros((b, hp, wp, cout), dtype=g.dtype)
    g_full[:, :oh, :ow] = g
    g_rows = g_full.reshape(-1, cout)[:n]
    dx = np.zeros((b * hp * wp, cin), dtype=g.dtype)
    dtaps = np.empty_like(taps)
    for ky in range(kh):
        for kx in range(kw):
            off = dilation * (ky * wp + kx)
            dtaps[ky, kx] = flat[off : off + n].T @ g_rows
            dx[off : off + n] += g_rows @ taps[ky, kx].T
    dx = dx.reshape(padded_shape)
    if padding:
        dx = dx[:, padding : hp - padding, padding : wp - padding]
    dw = np.ascontiguousarray(dtaps.transpose(3, 2, 0, 1))
    return np.ascontiguousarray(dx), dw, g.reshape(-1, cout).sum(axis=0)


def bn_forward_train(x, gain, shift, eps):
    rows = x.reshape(-1, x.shape[-1])
    mu = rows.mean(axis=0)
    var = rows.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    y = xhat * gain + shift
    return y, (xhat, inv_std, gain), mu, var


def bn_forward_eval(x, gain, shift, mean, var, eps):
    return (x - mean) / np.sqrt(var + eps) * gain + shift


def bn_backward(g, cache):
    xhat, inv_std, gain = cache
    c = g.shape[-1]
    g_rows, xhat_rows = g.reshape(-1, c), xhat.reshape(-1, c)
    n = g_rows.shape[0]
    dshift = g_rows.sum(axis=0)
    dgain = np.einsum("ij,ij->j", g_rows, xhat_rows)
    # d/dx of gain * (x - mean) / std, with both batch statistics differentiated
    dx = (gain * inv_std / n) * (n * g - dshift - xhat * dgain)
    return dx, dgain, dshift


def avgpool_forward(x):
    b, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    return x[:, : 2 * h2, : 2 * w2].reshape(b, h2, 2, w2, 2, c).mean(axis=(2, 4)), x.shape


def avgpool_backward(g, in_shape):
    dx = np.zeros(in_shape, dtype=g.dtype)
    h2, w2 = g.shape[1], g.shape[2]
    dx[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
    return dx


def upsample_forward(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample_backward(g):
    b, h, w, c = g.shape
    return g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


def activation_forward(x, kind: str, beta: float):
    """Returns (output, cache) for the smooth or straight-through activations."""
    if kind == "tanh":
        y = np.tanh(x)
        return y, y
    if kind == "tern_tanh":
        return tern_tanh(x, beta), x
    if kind == "tanh_beta":
        return tanh_beta(x, beta), x
    if kind == "boxcar":
        return np.where(x >= 0, 1, -1).astype(x.dtype), x
    raise ValueError(f"no trainable activation {kind!r}")


def activation_backward(g, kind: str, cache, beta: float):
    if kind == "tanh":
        return g * (1 - cache * cache)
    if kind == "tern_tanh":
        return g * tern_tanh_grad(cache, beta).astype(g.dtype)
    if kind == "tanh_beta":
        return g * tanh_beta_grad(cache, beta).astype(g.dtype)
    if kind == "boxcar":
        return g * (np.abs(cache) <= 1)
    raise ValueError(f"no trainable activation {kind!r}")


def softmax_ce_forward(scores, target, class_weights, axis=1):
    """Weighted cross-entropy averaged over all pixels; returns (loss, grad wrt scores).

    ``axis`` is the class axis of ``scores``; ``target`` has the remaining shape.
    """
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=axis, keepdims=True)
    p = e / total
    logp = z - np.log(total)
    t = np.expand_dims(target.astype(np.intp), axis)
    w = np.asarray(class_weights, dtype=scores.dtype)[t]
    picked = np.take_along_axis(logp, t, axis=axis)
    n = target.size
    loss = float(-(w * picked).sum() / n)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, t, 1.0, axis=axis)
    return loss, (p - onehot) * (w / n)
