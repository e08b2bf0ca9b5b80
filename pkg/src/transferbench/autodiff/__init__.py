"""Minimal reverse-mode differentiation over static layer graphs."""

from .engine import (
    ActivationTrace,
    GradSurgery,
    LossSpec,
    cross_entropy,
    finite_diff_grad,
    forward,
    grad_input,
    ila_loss,
    interaction_estimate,
    ir_loss,
    loss_value,
    param_grads,
    predict_proba,
    se_sum_loss,
)
from .graph import INPUT, LayerNode, ModelHandle, validate_graph
from .ops import softmax

__all__ = [
    "ActivationTrace",
    "GradSurgery",
    "INPUT",
    "LayerNode",
    "LossSpec",
    "ModelHandle",
    "cross_entropy",
    "finite_diff_grad",
    "forward",
    "grad_input",
    "ila_loss",
    "interaction_estimate",
    "ir_loss",
    "loss_value",
    "param_grads",
    "predict_proba",
    "se_sum_loss",
    "softmax",
    "validate_graph",
]
