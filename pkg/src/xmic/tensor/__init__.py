"""Dense tensors with reverse-mode differentiation and transformer primitives."""
from .blocks import NUM_HEADS, TransformerBlockParams, mlp, multi_head_attention, transformer_block
from .engine import Tensor, backward, concat, is_grad_enabled, no_grad, stack, tensor, topological_order
from .functional import (
    cosine_logits,
    cross_entropy,
    l2_normalize,
    layer_norm,
    linear,
    log_softmax,
    mean_pool,
    quick_gelu,
    relu,
    scaled_dot_attention,
    softmax,
)
from .gradcheck import GradCheckReport, grad_check

__all__ = [
    "NUM_HEADS", "GradCheckReport", "Tensor", "TransformerBlockParams", "backward", "concat",
    "cosine_logits", "cross_entropy", "grad_check", "is_grad_enabled", "l2_normalize", "layer_norm",
    "linear", "log_softmax", "mean_pool", "mlp", "multi_head_attention", "no_grad", "quick_gelu",
    "relu", "scaled_dot_attention", "softmax", "stack", "tensor", "topological_order",
    "transformer_block",
]
