"""Minimal float64 tensor engine with reverse-mode autodiff."""
from . import ops
from .gradcheck import finite_difference_check
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tensor import ShapeError, Tensor, as_tensor, backward, topological_order

__all__ = [
    "Adam", "AdamState", "ShapeError", "Tensor", "adam_step", "as_tensor", "backward",
    "clip_grad_norm", "finite_difference_check", "ops", "topological_order",
]
