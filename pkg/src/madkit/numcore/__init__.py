"""Float64 reverse-mode autodiff engine."""

from .tensor import Tensor, as_tensor, backward, parameter
from .ops import (
    add, sub, mul, div, neg, matmul, exp, log, sqrt, tanh, power,
    reduce_sum, reduce_mean, reshape, transpose, getitem, concat,
    broadcast_to, gelu, layer_norm, softmax, softmax_centered,
    cross_entropy, cross_entropy_rows, smooth_l1, set_finite_checks,
    finite_checks_enabled,
)
from .gradcheck import grad_check

__all__ = [
    "Tensor", "as_tensor", "backward", "parameter",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "sqrt",
    "tanh", "power", "reduce_sum", "reduce_mean", "reshape", "transpose",
    "getitem", "concat", "broadcast_to", "gelu", "layer_norm", "softmax",
    "softmax_centered", "cross_entropy", "cross_entropy_rows", "smooth_l1",
    "set_finite_checks", "finite_checks_enabled", "grad_check",
]
