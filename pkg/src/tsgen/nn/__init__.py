"""Minimal dense-tensor substrate with reverse-mode differentiation."""

from .gradcheck import finite_diff_check
from .kernels import backend
from .tensor import (
    Parameter,
    Tensor,
    add,
    backward,
    causal_masked_attention,
    causal_softmax,
    gelu,
    layer_norm,
    matmul,
    mul,
    no_grad,
    reshape,
    scale,
    softmax_last_axis,
    sub,
    sum_all,
    take_rows,
    transpose,
    zero_grad,
)

__all__ = [
    "Parameter",
    "Tensor",
    "add",
    "backend",
    "backward",
    "causal_masked_attention",
    "causal_softmax",
    "finite_diff_check",
    "gelu",
    "layer_norm",
    "matmul",
    "mul",
    "no_grad",
    "reshape",
    "scale",
    "softmax_last_axis",
    "sub",
    "sum_all",
    "take_rows",
    "transpose",
    "zero_grad",
]
