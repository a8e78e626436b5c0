"""Minimal reverse-mode differentiation over numpy arrays."""
from . import ops
from .gradcheck import GradCheckResult, gradient_check, numerical_gradient
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    as_tensor,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
    zero_grads,
)

__all__ = [
    "GradCheckResult",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "get_default_dtype",
    "gradient_check",
    "is_grad_enabled",
    "no_grad",
    "numerical_gradient",
    "ops",
    "precision",
    "set_default_dtype",
    "zero_grads",
]
