"""Adam with bias correction and global-norm gradient clipping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One in-place Adam update of ``params``.

    Moments are created lazily on the first call. A tensor whose gradient has
    any non-finite entry is left untouched for this step (its moments too).
    """
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"param {i}: shape {p.shape}, grad {g.shape}, moment {state.m[i].shape}")
        if not np.all(np.isfinite(g)):
            log.warning("adam: non-finite gradient for param %d at step %d, skipped", i, t)
            continue
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        p.data -= lr * (state.m[i] / c1) / (np.sqrt(state.v[i] / c2) + eps)
    return state


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` jointly so their global L2 norm is at most ``max_norm``.

    Non-finite gradients are excluded from the norm and passed through, so
    the per-tensor skip in :func:`adam_step` still sees them.
    """
    finite = [g for g in grads if np.all(np.isfinite(g))]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in finite)))
    if max_norm <= 0 or norm <= max_norm:
        return list(grads), norm
    scale = max_norm / (norm + 1e-12)
    return [g * scale if np.all(np.isfinite(g)) else g for g in grads], norm


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip_norm: float | None = 5.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.state = AdamState()
        self.last_grad_norm = 0.0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if self.clip_norm:
            grads, self.last_grad_norm = clip_grad_norm(grads, self.clip_norm)
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
