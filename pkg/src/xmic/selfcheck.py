"""Finite-difference self-verification suite used by ``xmic gradcheck``."""
from __future__ import annotations

import numpy as np

from .adapters import XmicAdapter, condition_rows, xmic_forward
from .tensor import (
    Tensor,
    TransformerBlockParams,
    cosine_logits,
    cross_entropy,
    grad_check,
    l2_normalize,
    layer_norm,
    log_softmax,
    mean_pool,
    quick_gelu,
    scaled_dot_attention,
    softmax,
    transformer_block,
)

TOLERANCE = 1e-4


def _w(rng, shape):
    return rng.standard_normal(shape)


def _primitive_cases(rng):
    x = rng.standard_normal((3, 4))
    w = _w(rng, (3, 4))
    mw, cw = _w(rng, (3, 2)), _w(rng, (2, 3))
    yield "add/mul/div", lambda a, b: ((a + b) * a / (b * b + 1.0) * w).sum(), [x, rng.standard_normal((1, 4))]
    yield "matmul", lambda a, b: ((a @ b) * mw).sum(), [x, rng.standard_normal((4, 2))]
    yield "exp/log/sqrt", lambda a: ((a.exp() + (a * a + 1.0).log() + (a * a + 0.5).sqrt()) * w).sum(), [x]
    yield "sigmoid/tanh/relu", lambda a: ((a.sigmoid() + a.tanh() + (a + 0.05).relu()) * w).sum(), [x]
    yield "quick_gelu", lambda a: (quick_gelu(a) * w).sum(), [x]
    yield "softmax", lambda a: (softmax(a) * w).sum(), [x]
    yield "log_softmax", lambda a: (log_softmax(a) * w).sum(), [x]
    yield "l2_normalize", lambda a: (l2_normalize(a) * w).sum(), [x]
    yield "mean_pool", lambda a: (mean_pool(a) * w[0]).sum(), [x]
    g, b = rng.standard_normal(4), rng.standard_normal(4)
    yield "layer_norm", lambda a, gg, bb: (layer_norm(a, gg, bb) * w).sum(), [x, g, b]
    yield "cross_entropy", lambda a: cross_entropy(a, [0, 3, 1]), [x]
    q = l2_normalize(Tensor(rng.standard_normal((2, 4)))).data
    c = l2_normalize(Tensor(rng.standard_normal((3, 4)))).data
    yield "cosine_logits", lambda a, b: (cosine_logits(a, b, 0.5, check=False) * cw).sum(), [q, c]
    qkv = [rng.standard_normal((2, 3, 4)) for _ in range(3)]
    aw = _w(rng, (2, 3, 4))
    yield "attention", lambda a, b, v: (scaled_dot_attention(a, b, v, 0.5) * aw).sum(), qkv


def _pipeline_case(rng, D=16, N=3, C=4, B=2):
    """xmic_forward + condition_classifier + cosine logits + cross-entropy, blocks with nonzero residuals."""
    adapter = XmicAdapter.init(D, rng, np.float64, zero_init=False, out_proj=True)
    adapter.out_proj.data = rng.standard_normal((D, D)) * 0.3
    frames = rng.standard_normal((B, N, D))
    hands = rng.standard_normal((B, N, D))
    raw = rng.standard_normal((C, D)) * 2.0
    ev = l2_normalize(Tensor(rng.standard_normal((B, D)))).data
    labels = rng.integers(0, C, size=B)
    params = adapter.named_parameters()
    names = sorted(params)

    def loss(fr, ha, e_raw, *weights):
        for n, t in zip(names, weights):
            setattr_param(adapter, n, t)
        a_v = xmic_forward(fr, ha, adapter)
        rows = condition_rows(e_raw, a_v, adapter.alpha, adapter.norm_flags)
        return cross_entropy(cosine_logits(ev, rows, 0.5, check=False), labels)

    inputs = [frames, hands, raw] + [params[n].data.copy() for n in names]
    return "xmic pipeline", loss, inputs


def setattr_param(adapter: XmicAdapter, name: str, value: Tensor):
    parts = name.split(".")[1:]
    if parts[0] == "out_proj":
        adapter.out_proj = value
        return
    block = adapter.b_S if parts[0] == "b_S" else adapter.b_T[int(parts[0][3:])]
    setattr(block, parts[1], value)


def _block_case(rng, D=16, L=3):
    blk = TransformerBlockParams.init(D, rng, np.float64, zero_residual=False, std=0.3)
    x = rng.standard_normal((L, D))
    w = rng.standard_normal((L, D))
    return "transformer block", lambda a: (transformer_block(a, blk) * w).sum(), [x]


def run_suite(seed: int = 0, tolerance: float = TOLERANCE):
    """``[(name, GradCheckReport)]`` over every primitive and the composed X-MIC loss."""
    rng = np.random.default_rng(seed)
    cases = list(_primitive_cases(rng)) + [_block_case(rng), _pipeline_case(rng)]
    return [(name, grad_check(f, inputs, tolerance=tolerance)) for name, f, inputs in cases]
