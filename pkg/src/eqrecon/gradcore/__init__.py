"""Dense tensors with tape-based reverse-mode differentiation."""

from . import functions
from .nn import MLP, LayerNorm, Linear, Module, Parameter
from .tensor import (
    REGISTRY,
    ContractError,
    DimensionError,
    Function,
    Tape,
    Tensor,
    backward,
    grad_of,
    is_grad_enabled,
    no_grad,
)

__all__ = [
    "REGISTRY",
    "ContractError",
    "DimensionError",
    "Function",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "functions",
    "grad_of",
    "is_grad_enabled",
    "no_grad",
]
