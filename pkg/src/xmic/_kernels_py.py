"""Pure numpy implementations of the hot kernels.

Every function here has a twin in ``_kernels.pyx`` with the same signature;
:mod:`xmic.kernels` picks one at import time.
"""
import numpy as np


def attention_forward(q, k, v, scale):
    """Scaled dot-product attention over ``[G, L, dh]`` groups.

    Returns ``(out, probs)`` with ``probs`` of shape ``[G, L, L]``.
    """
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * scale
    scores -= scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    return np.matmul(probs, v), probs


def attention_backward(q, k, v, probs, gout, scale):
    gv = np.matmul(np.swapaxes(probs, -1, -2), gout)
    gp = np.matmul(gout, np.swapaxes(v, -1, -2))
    gs = probs * (gp - (gp * probs).sum(axis=-1, keepdims=True))
    gq = np.matmul(gs, k) * scale
    gk = np.matmul(np.swapaxes(gs, -1, -2), q) * scale
    return gq, gk, gv


def layer_norm_forward(x, eps):
    """Normalize rows of a 2-D array; returns ``(xhat, rstd)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[..., 0]


def layer_norm_backward(xhat, rstd, gxhat):
    m1 = gxhat.mean(axis=-1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    return (gxhat - m1 - xhat * m2) * rstd[..., None]


def adamw_update(w, g, m, v, lr, beta1, beta2, eps, weight_decay, step):
    """In-place decoupled AdamW update of flat arrays ``w``, ``m``, ``v``."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    update = (m / bc1) / (np.sqrt(v / bc2) + eps) + weight_decay * w
    w -= lr * update
