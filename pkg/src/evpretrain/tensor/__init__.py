"""Minimal dense-tensor reverse-mode autodiff."""

from .engine import (
    DIFFERENTIABLE_KINDS,
    KINDS,
    ForwardNotRunError,
    Graph,
    GraphError,
    LossNotScalarError,
    Node,
    NonFiniteError,
    ShapeError,
    Tensor,
    UnboundInputError,
    backward,
    forward_eval,
    zero_grad,
)
from .gradcheck import GradCheckReport, ParamCheck, grad_check
from .optim import MissingGradError, Optimizer

__all__ = [
    "DIFFERENTIABLE_KINDS",
    "KINDS",
    "ForwardNotRunError",
    "GradCheckReport",
    "Graph",
    "GraphError",
    "LossNotScalarError",
    "MissingGradError",
    "Node",
    "NonFiniteError",
    "Optimizer",
    "ParamCheck",
    "ShapeError",
    "Tensor",
    "UnboundInputError",
    "backward",
    "forward_eval",
    "grad_check",
    "zero_grad",
]
