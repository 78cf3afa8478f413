"""2-D convolution (NHWC, 'same' padding), batch normalization, subpixel shuffle."""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _same_pad(size, k, s):
    out = math.ceil(size / s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d_forward(x, W, b, stride=(1, 1)):
    """Cross-correlation with TensorFlow-style 'same' padding.

    x: (B, H, W, Cin); W: (kh, kw, Cin, Cout); b: (Cout,).
    """
    B, H, Wd, C = x.shape
    kh, kw, cin, cout = W.shape
    if cin != C:
        raise ValueError(f"input has {C} channels, kernel expects {cin}")
    sh, sw = stride
    Ho, ph0, ph1 = _same_pad(H, kh, sh)
    Wo, pw0, pw1 = _same_pad(Wd, kw, sw)
    xp = np.pad(x, ((0, 0), (ph0, ph1), (pw0, pw1), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::sh, ::sw][:, :Ho, :Wo]
    # win: (B, Ho, Wo, C, kh, kw) -> columns ordered (kh, kw, C)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)
    y = cols @ W.reshape(-1, cout) + b
    cache = (cols, x.shape, xp.shape, W, stride, (ph0, pw0), (Ho, Wo))
    return y.reshape(B, Ho, Wo, cout), cache


def conv2d_backward(dy, cache, need_dx=True):
    cols, xshape, pshape, W, (sh, sw), (ph0, pw0), (Ho, Wo) = cache
    B, H, Wd, C = xshape
    kh, kw, _, cout = W.shape
    g = dy.reshape(-1, cout)
    dW = (cols.T @ g).reshape(W.shape)
    db = g.sum(axis=0)
    if not need_dx:
        return None, dW, db
    if (sh, sw) == (1, 1) and cout <= C:
        # transposed convolution as a correlation with the flipped kernel;
        # far cheaper than scattering columns when Cout is small
        ph1 = pshape[1] - H - ph0
        pw1 = pshape[2] - Wd - pw0
        dyp = np.pad(dy, ((0, 0), (kh - 1 - ph0, kh - 1 - ph1), (kw - 1 - pw0, kw - 1 - pw1), (0, 0)))
        Wf = np.ascontiguousarray(W[::-1, ::-1].transpose(0, 1, 3, 2))
        win = sliding_window_view(dyp, (kh, kw), axis=(1, 2))
        dcols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * H * Wd, kh * kw * cout)
        return (dcols @ Wf.reshape(-1, C)).reshape(xshape), dW, db
    dcols = (g @ W.reshape(-1, cout).T).reshape(B, Ho, Wo, kh, kw, C)
    dxp = np.zeros(pshape, dtype=dy.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i : i + sh * Ho : sh, j : j + sw * Wo : sw, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, ph0 : ph0 + H, pw0 : pw0 + Wd, :]
    return dx, dW, db


def batchnorm_forward(x, gamma, beta, state, train=True, momentum=0.9, eps=1e-5):
    """Per-channel standardization over all but the last axis.

    ``state`` holds running ``mean``/``var`` arrays; it is updated in place
    in training mode and used instead of batch statistics in evaluation.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if state is not None:
            state["mean"] = momentum * state["mean"] + (1 - momentum) * mean
            state["var"] = momentum * state["var"] + (1 - momentum) * var
    else:
        mean, var = state["mean"], state["var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv
    return xhat * gamma + beta, (xhat, inv, gamma, train)


def batchnorm_backward(dy, cache):
    xhat, inv, gamma, train = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if not train:
        return dxhat * inv, dgamma, dbeta
    m = dy.size // dy.shape[-1]
    dx = (inv / m) * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def subpixel_shuffle(x, s=2):
    """(B, H, W, s*C) -> (B, s*H, W, C); channel block i becomes sub-row i."""
    B, H, W, SC = x.shape
    if SC % s:
        raise ValueError(f"{SC} channels not divisible by factor {s}")
    C = SC // s
    return x.reshape(B, H, W, s, C).transpose(0, 1, 3, 2, 4).reshape(B, H * s, W, C)


def subpixel_unshuffle(y, s=2):
    """Exact inverse of :func:`subpixel_shuffle`."""
    B, SH, W, C = y.shape
    if SH % s:
        raise ValueError(f"{SH} rows not divisible by factor {s}")
    return y.reshape(B, SH // s, s, W, C).transpose(0, 1, 3, 2, 4).reshape(B, SH // s, W, s * C)
