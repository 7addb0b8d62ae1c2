"""Differentiable primitives built on :class:`Tensor`.

Ops with awkward numerics (normalization, softmax, cross-entropy, attention)
have fused forward/backward rules instead of being composed from elementwise
pieces.
"""
from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import BadLabelError, BadShapeError, EmptySequenceError, NotNormalizedError, ZeroNormError
from .engine import Tensor

L2_EPS = 1e-12
LN_EPS = 1e-5
GELU_COEF = 1.702


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def l2_normalize(x, eps: float = L2_EPS) -> Tensor:
    """Scale every last-axis slice to unit Euclidean norm."""
    x = as_tensor(x)
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(norms <= eps):
        raise ZeroNormError("cannot l2-normalize a slice with norm <= %g" % eps)
    y = x.data / norms

    def back(g):
        x._accum((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norms)

    return Tensor._make(y, (x,), back, "l2_normalize")


def mean_pool(x, axis: int = -2) -> Tensor:
    """Arithmetic mean over the sequence axis (first axis of an ``[N, D]`` input)."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] == 0:
        raise EmptySequenceError("mean_pool over an empty sequence")
    return x.mean(axis=axis)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    xhat, rstd = kernels.layer_norm_forward(flat, eps)
    xhat = np.asarray(xhat)
    rstd = np.asarray(rstd)
    out = (xhat * gain.data + bias.data).reshape(x.shape)

    def back(g):
        g2 = g.reshape(-1, d)
        if gain.requires_grad:
            gain._accum((g2 * xhat).sum(axis=0))
        if bias.requires_grad:
            bias._accum(g2.sum(axis=0))
        if x.requires_grad:
            gxhat = np.ascontiguousarray(g2 * gain.data, dtype=xhat.dtype)
            x._accum(np.asarray(kernels.layer_norm_backward(xhat, rstd, gxhat)).reshape(x.shape))

    return Tensor._make(out, (x, gain, bias), back, "layer_norm")


def quick_gelu(x) -> Tensor:
    """``x * sigmoid(1.702 x)``."""
    x = as_tensor(x)
    s = 1.0 / (1.0 + np.exp(-GELU_COEF * x.data))

    def back(g):
        x._accum(g * (s + GELU_COEF * x.data * s * (1.0 - s)))

    return Tensor._make(x.data * s, (x,), back, "quick_gelu")


def relu(x) -> Tensor:
    return as_tensor(x).relu()


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        x._accum(p * (g - np.sum(g * p, axis=axis, keepdims=True)))

    return Tensor._make(p, (x,), back, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        p = np.exp(out)
        x._accum(g - p * np.sum(g, axis=axis, keepdims=True))

    return Tensor._make(out, (x,), back, "log_softmax")


def cross_entropy(logits, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise BadShapeError(f"logits must be [B, C], got {logits.shape}")
    b, c = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if len(labels) != b:
        raise BadShapeError(f"{len(labels)} labels for batch of {b}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise BadLabelError(f"labels must lie in [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(lse - z[rows, labels])

    def back(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        logits._accum(p * (g / b))

    return Tensor._make(np.asarray(loss, dtype=logits.dtype), (logits,), back, "cross_entropy")


def check_unit_rows(x: np.ndarray, tol: float = 1e-4, what: str = "rows"):
    norms = np.sqrt(np.sum(np.asarray(x) ** 2, axis=-1))
    if np.any(np.abs(norms - 1.0) > tol):
        raise NotNormalizedError(f"{what} must be unit-norm within {tol}")


def cosine_logits(queries, classifier, temperature: float, check: bool = True) -> Tensor:
    """``queries @ classifier.T / temperature`` for unit-norm rows.

    ``classifier`` may be ``[C, D]`` (shared) or ``[B, C, D]`` (one classifier
    per query, as produced by instance conditioning).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    queries, classifier = as_tensor(queries), as_tensor(classifier)
    if check:
        check_unit_rows(queries.data, what="queries")
        check_unit_rows(classifier.data, what="classifier rows")
    if classifier.ndim == 2:
        out = queries @ classifier.T
    else:
        out = (classifier @ queries.reshape(queries.shape[0], queries.shape[1], 1)).reshape(
            queries.shape[0], classifier.shape[1]
        )
    return out * (1.0 / temperature)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as ``[in, out]``."""
    out = as_tensor(x) @ weight
    return out + bias if bias is not None else out


def scaled_dot_attention(q, k, v, scale: float) -> Tensor:
    """Softmax attention over the last two axes of ``[..., L, dh]`` tensors."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    lead = q.shape[:-2]
    L, dh = q.shape[-2:]
    dt = q.dtype

    def flat(t):
        return np.ascontiguousarray(t.data.reshape(-1, L, dh), dtype=dt)

    qf, kf, vf = flat(q), flat(k), flat(v)
    out, probs = kernels.attention_forward(qf, kf, vf, scale)
    out, probs = np.asarray(out), np.asarray(probs)

    def back(g):
        gf = np.ascontiguousarray(g.reshape(-1, L, dh), dtype=dt)
        gq, gk, gv = kernels.attention_backward(qf, kf, vf, probs, gf, scale)
        q._accum(np.asarray(gq).reshape(q.shape))
        k._accum(np.asarray(gk).reshape(k.shape))
        v._accum(np.asarray(gv).reshape(v.shape))

    return Tensor._make(out.reshape(lead + (L, dh)), (q, k, v), back, "attention")
