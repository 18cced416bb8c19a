"""Central-difference gradient oracle."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def finite_difference_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray,
                            eps: float = 1e-5, atol: float = 0.0) -> float:
    """Largest relative disagreement between autodiff and central differences.

    ``f`` maps a tensor to a scalar tensor and must be deterministic. Per
    coordinate the error is ``|a - n| / (|a| + |n| + 1e-12)``. Coordinates
    where both values fall below ``atol`` count as agreeing zeros; relative
    error is meaningless for gradients that vanish identically.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    (analytic,) = backward(f(xt), [xt])
    numeric = np.empty_like(base)
    flat, out = base.reshape(-1), numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(Tensor(base.copy())).item()
        flat[i] = orig - eps
        down = f(Tensor(base.copy())).item()
        flat[i] = orig
        out[i] = (up - down) / (2.0 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    err[(np.abs(analytic) < atol) & (np.abs(numeric) < atol)] = 0.0
    return float(err.max(initial=0.0))
