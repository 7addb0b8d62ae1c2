"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_input: list = field(default_factory=list)
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_grad(f, inputs: list, index: int, step: float) -> np.ndarray:
    x = inputs[index]
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = float(f(*inputs).data)
        flat[i] = orig - step
        minus = float(f(*inputs).data)
        flat[i] = orig
        out[i] = (plus - minus) / (2.0 * step)
    return grad


def grad_check(f, inputs, step: float = 1e-5, tolerance: float = 1e-6, floor: float = 1e-3) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` with central differences.

    ``inputs`` are arrays or tensors; they are copied into float64 tensors that
    require gradients. ``floor`` keeps the relative error of near-zero
    coordinates from blowing up.
    """
    ts = [Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64, order="C"), True) for x in inputs]
    out = f(*ts)
    backward(out, inputs=ts)
    analytic = [t.grad.copy() for t in ts]
    worst_err, worst = 0.0, None
    per_input = []
    for i, t in enumerate(ts):
        numeric = numeric_grad(f, ts, i, step)
        err = relative_error(analytic[i], numeric, floor)
        m = float(err.max()) if err.size else 0.0
        per_input.append(m)
        if m > worst_err or worst is None:
            worst_err = max(worst_err, m)
            if err.size:
                j = int(np.argmax(err))
                worst = (i, j, float(analytic[i].reshape(-1)[j]), float(numeric.reshape(-1)[j]))
    return GradCheckReport(worst_err, tolerance, per_input, worst)
