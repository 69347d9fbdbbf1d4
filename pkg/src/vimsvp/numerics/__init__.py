"""Dense tensors with reverse-mode autodiff on top of numpy."""

from vimsvp.numerics.gradcheck import GradCheckReport, ParamReport, grad_check, relative_error
from vimsvp.numerics.ops import (
    add,
    broadcast_batch,
    concat,
    cross_entropy_loss,
    depthwise_conv1d,
    exp,
    flip,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    permute,
    reshape,
    sigmoid,
    silu,
    softplus,
    sub,
    sum,
    take,
    unbroadcast,
)
from vimsvp.numerics.tensor import (
    Node,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    dtype_for,
    get_dtype,
    make_result,
    no_grad,
    precision,
    set_finite_checks,
    set_precision,
)

__all__ = [
    "GradCheckReport", "Node", "ParamReport", "Tape", "Tensor", "active_tape", "add", "as_tensor",
    "backward", "broadcast_batch", "concat", "cross_entropy_loss", "depthwise_conv1d", "dtype_for",
    "exp", "flip", "get_dtype", "grad_check", "layer_norm", "linear", "make_result", "matmul", "mean",
    "mul", "narrow", "neg", "permute", "no_grad", "precision", "relative_error", "reshape", "set_finite_checks",
    "set_precision", "sigmoid", "silu", "softplus", "sub", "sum", "take", "unbroadcast",
]
