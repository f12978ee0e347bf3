"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import ops
from .gradcheck import grad_check
from .params import ParameterStore, glorot_uniform
from .tensor import Node, Primitive, Tape, Tensor, apply, backward, count_ops, current_tape, no_grad

__all__ = [
    "Node",
    "ParameterStore",
    "Primitive",
    "Tape",
    "Tensor",
    "apply",
    "backward",
    "count_ops",
    "current_tape",
    "glorot_uniform",
    "grad_check",
    "no_grad",
    "ops",
]
