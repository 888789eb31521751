"""Dense tensors plus a reverse-mode differentiable primitive set."""

from .graph import OWNER_GROUPS, Graph, ParameterStore, Tape
from .gradcheck import GradCheckReport, check_loss_gradient, grad_check, rel_err
from .ops import (
    LEAKY_SLOPE,
    NORM_EPS,
    NORM_MOMENTUM,
    OP_KINDS,
    Ctx,
    OpSpec,
    backward_op,
    conv_out_size,
    deconv_out_size,
    forward_op,
)

__all__ = [
    "Ctx",
    "Graph",
    "GradCheckReport",
    "LEAKY_SLOPE",
    "NORM_EPS",
    "NORM_MOMENTUM",
    "OP_KINDS",
    "OWNER_GROUPS",
    "OpSpec",
    "ParameterStore",
    "Tape",
    "backward_op",
    "check_loss_gradient",
    "conv_out_size",
    "deconv_out_size",
    "forward_op",
    "grad_check",
    "rel_err",
]
