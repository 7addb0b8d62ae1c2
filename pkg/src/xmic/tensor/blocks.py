"""Pre-norm transformer block: ``x + MHA(LN(x))`` then ``x + MLP(LN(x))``."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from ..errors import BadShapeError
from .engine import Tensor
from .functional import layer_norm, linear, quick_gelu, scaled_dot_attention

NUM_HEADS = 8
INIT_STD = 0.02


@dataclass
class TransformerBlockParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    w_fc: Tensor
    b_fc: Tensor
    w_proj: Tensor
    b_proj: Tensor
    heads: int = NUM_HEADS

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_fc.shape[1]

    def named_tensors(self, prefix: str = "") -> dict:
        return {prefix + f.name: getattr(self, f.name) for f in fields(self) if f.name != "heads"}

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, dtype=np.float64, zero_residual: bool = True,
             std: float = INIT_STD, requires_grad: bool = True) -> "TransformerBlockParams":
        """Gaussian projections, zero biases, unit layer-norm gains.

        With ``zero_residual`` the attention output projection and the second
        MLP layer start at zero, so the block is the identity map.
        """
        if dim % NUM_HEADS:
            raise BadShapeError(f"dim {dim} is not divisible by {NUM_HEADS} heads")
        hidden = dim // 4
        if hidden < 1:
            raise BadShapeError("dim too small for a D/4 bottleneck")

        def gauss(*shape):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad)

        def const(value, *shape):
            return Tensor(np.full(shape, value, dtype=dtype), requires_grad)

        w_o = const(0.0, dim, dim) if zero_residual else gauss(dim, dim)
        w_proj = const(0.0, hidden, dim) if zero_residual else gauss(hidden, dim)
        return cls(
            ln1_gain=const(1.0, dim), ln1_bias=const(0.0, dim),
            w_q=gauss(dim, dim), b_q=const(0.0, dim),
            w_k=gauss(dim, dim), b_k=const(0.0, dim),
            w_v=gauss(dim, dim), b_v=const(0.0, dim),
            w_o=w_o, b_o=const(0.0, dim),
            ln2_gain=const(1.0, dim), ln2_bias=const(0.0, dim),
            w_fc=gauss(dim, hidden), b_fc=const(0.0, hidden),
            w_proj=w_proj, b_proj=const(0.0, dim),
        )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, D = x.shape
    return x.reshape(tuple(lead) + (L, heads, D // heads)).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dh = x.shape
    return x.swapaxes(-2, -3).reshape(tuple(lead) + (L, H * dh))


def multi_head_attention(seq, params: TransformerBlockParams) -> Tensor:
    """Self-attention over the ``L`` axis of ``[..., L, D]``; no positional encoding."""
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    D = seq.shape[-1]
    H = params.heads
    if D % H:
        raise BadShapeError(f"dim {D} is not divisible by {H} heads")
    if D != params.dim:
        raise BadShapeError(f"input dim {D} does not match block dim {params.dim}")
    if seq.ndim < 2 or seq.shape[-2] < 1:
        raise BadShapeError("attention needs a [..., L, D] input with L >= 1")
    q = _split_heads(linear(seq, params.w_q, params.b_q), H)
    k = _split_heads(linear(seq, params.w_k, params.b_k), H)
    v = _split_heads(linear(seq, params.w_v, params.b_v), H)
    attn = scaled_dot_attention(q, k, v, 1.0 / np.sqrt(D // H))
    return linear(_merge_heads(attn), params.w_o, params.b_o)


def mlp(x, params: TransformerBlockParams) -> Tensor:
    return linear(quick_gelu(linear(x, params.w_fc, params.b_fc)), params.w_proj, params.b_proj)


def transformer_block(seq, params: TransformerBlockParams) -> Tensor:
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    x = seq + multi_head_attention(layer_norm(seq, params.ln1_gain, params.ln1_bias), params)
    return x + mlp(layer_norm(x, params.ln2_gain, params.ln2_bias), params)
