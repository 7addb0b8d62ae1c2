"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback. Set ``XMIC_PURE_PYTHON=1`` to force the fallback.

Even with the extension present, calls are routed by measured speed
(``benchmarks/bench_kernels.py``): attention over short, narrow groups and
layer norm run compiled; wide attention groups and the AdamW update, where
numpy's vectorized loops win, stay on the fallback.
"""
import os

from . import _kernels_py

_compiled = None
if os.environ.get("XMIC_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"
_impl = _compiled if _compiled is not None else _kernels_py

# per-group work (L * dh) up to which the compiled attention loop beats numpy
COMPILED_ATTENTION_MAX_WORK = 32


def _attention_impl(q):
    if _compiled is not None and q.shape[1] * q.shape[2] <= COMPILED_ATTENTION_MAX_WORK:
        return _compiled
    return _kernels_py


def attention_forward(q, k, v, scale):
    """``[G, L, dh]`` softmax attention; returns ``(out, probs)``."""
    return _attention_impl(q).attention_forward(q, k, v, scale)


def attention_backward(q, k, v, probs, gout, scale):
    return _attention_impl(q).attention_backward(q, k, v, probs, gout, scale)


layer_norm_forward = _impl.layer_norm_forward
layer_norm_backward = _impl.layer_norm_backward
adamw_update = _kernels_py.adamw_update


def backends():
    """Return ``{name: module}`` for every importable backend."""
    out = {"python": _kernels_py}
    if _compiled is not None:
        out["cython"] = _compiled
    else:
        try:
            from . import _kernels as compiled
        except ImportError:
            pass
        else:
            out["cython"] = compiled
    return out
