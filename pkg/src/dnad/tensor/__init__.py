from . import ops
from .gradcheck import NonFiniteError, analytic_grads, grad_check
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    no_record,
    precision,
    set_default_dtype,
)

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "analytic_grads",
    "as_tensor",
    "backward",
    "default_dtype",
    "grad_check",
    "no_record",
    "ops",
    "precision",
    "set_default_dtype",
]
