"""Forward/backward pairs for the layer vocabulary used by the networks.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and the cache and returns the input gradient
(plus parameter gradients where the layer has parameters).
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


# --- dense / shared MLP -----------------------------------------------------


def dense_forward(x, W, b):
    """Affine map over the last axis.

    Applied to a (Q, K, Cin) block this is the shared per-point MLP layer
    (a 1x1 convolution): the same weights act at every position.
    """
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"input has {x.shape[-1]} channels, weight expects {W.shape[0]}")
    # one 2-D GEMM; matmul on stacked blocks would loop over small matrices
    y = x.reshape(-1, x.shape[-1]) @ W
    y += b
    return y.reshape(x.shape[:-1] + (W.shape[1],)), (x, W)


def dense_backward(dy, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    g2 = dy.reshape(-1, dy.shape[-1])
    dx = (g2 @ W.T).reshape(x.shape)
    return dx, x2.T @ g2, g2.sum(axis=0)


def leaky_relu_forward(x, slope=0.2):
    if not 0 <= slope <= 1:
        raise ValueError("leak slope must be in [0, 1]")
    y = x * x.dtype.type(slope)
    np.maximum(x, y, out=y)
    return y, x


def leaky_relu_backward(dy, x, slope=0.2):
    # arithmetic masking; np.where on large blocks is several times slower
    s = dy.dtype.type(slope)
    f = (x > 0).astype(dy.dtype)
    f *= 1 - s
    f += s
    f *= dy
    return f


def shared_mlp_forward(block, weights, leak=0.2):
    """Stack of (1x1 conv + leaky ReLU) layers; ``weights`` is [(W, b), ...]."""
    caches = []
    h = block
    for W, b in weights:
        a, c_dense = dense_forward(h, W, b)
        h, c_act = leaky_relu_forward(a, leak)
        caches.append((c_dense, c_act))
    return h, caches


def shared_mlp_backward(dy, caches, leak=0.2):
    """Returns (d_block, [(dW, db), ...]) in layer order."""
    grads = []
    g = dy
    for c_dense, c_act in reversed(caches):
        g = leaky_relu_backward(g, c_act, leak)
        g, dW, db = dense_backward(g, c_dense)
        grads.append((dW, db))
    return g, grads[::-1]


# --- parametric ReLU --------------------------------------------------------


def prelu_forward(x, alpha):
    """Leaky rectifier with a trainable per-channel negative slope."""
    return np.where(x > 0, x, x * alpha), (x, alpha)


def prelu_backward(dy, cache):
    x, alpha = cache
    neg = x <= 0
    dx = np.where(neg, dy * alpha, dy)
    dalpha = np.where(neg, dy * x, 0).reshape(-1, x.shape[-1]).sum(axis=0)
    return dx, dalpha


# --- reductions -------------------------------------------------------------


def reduce_max_forward(block):
    """Max over the neighbor axis (second to last). Ties go to the lowest k."""
    if block.shape[-2] < 1:
        raise ValueError("need at least one neighbor")
    out = block.max(axis=-2)
    winner = block == out[..., None, :]
    hits = np.add.reduce(winner, axis=-2, dtype=np.uint16)
    if np.any(hits > 1):
        # keep only the first maximal k
        winner &= np.cumsum(winner, axis=-2, dtype=np.uint16) == 1
    return out, winner


def reduce_max_backward(dy, winner):
    return np.multiply(winner, dy[..., None, :], dtype=dy.dtype)


# --- gradient reversal ------------------------------------------------------


def grad_reverse_forward(x, lam):
    if lam < 0:
        raise ValueError("reversal factor must be non-negative")
    return x, lam


def grad_reverse_backward(dy, lam):
    return dy * dy.dtype.type(-lam)


# --- dropout ----------------------------------------------------------------


def dropout_forward(x, rate=0.5, train=True, rng=None):
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    if not train or rate == 0:
        return x, None
    if rng is None:
        rng = np.random.default_rng()
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_backward(dy, mask):
    return dy if mask is None else dy * mask


# --- softmax / cross-entropy ------------------------------------------------


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, targets, weights=None):
    """Weighted mean cross-entropy over rows.

    Returns ``(loss, dlogits)``. The mean divides by the number of rows, so
    zero-weight rows still count in the denominator but contribute nothing.
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise NonFiniteError("non-finite logits")
    rows, units = logits.shape
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (rows,) or np.any(targets < 0) or np.any(targets >= units):
        raise ValueError("targets must be one class index < U per row")
    if weights is None:
        weights = np.ones(rows, dtype=logits.dtype)
    weights = np.asarray(weights, dtype=logits.dtype)
    if np.any(weights < 0):
        raise ValueError("row weights must be non-negative")
    logp = log_softmax(logits)
    picked = logp[np.arange(rows), targets]
    loss = -(weights * picked).sum() / rows
    grad = np.exp(logp)
    grad[np.arange(rows), targets] -= 1
    grad *= (weights / rows)[:, None]
    return loss, grad


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1 / (1 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1 + e)
    return out


def softplus(x):
    return np.logaddexp(0, x)
