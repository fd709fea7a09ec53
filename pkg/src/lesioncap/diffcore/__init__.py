"""Minimal reverse-mode differentiable arrays on top of numpy."""
from .array import (
    DiffArray,
    GraphError,
    ShapeError,
    as_array,
    backward,
    custom_op,
    get_default_dtype,
    set_default_dtype,
    zero_grad,
)
from .gradcheck import GRADCHECK_STEP, GRADCHECK_TOL, GradCheckReport, grad_check, numerical_grad
from .ops import (
    add,
    avg_pool2d,
    broadcast_mul,
    concat,
    conv2d,
    cross_entropy,
    embedding_lookup,
    layer_norm,
    matmul,
    max_pool2d,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    sub,
    transpose,
)

__all__ = [
    "DiffArray", "GraphError", "ShapeError", "as_array", "backward", "custom_op",
    "get_default_dtype", "set_default_dtype", "zero_grad",
    "GRADCHECK_STEP", "GRADCHECK_TOL", "GradCheckReport", "grad_check", "numerical_grad",
    "add", "avg_pool2d", "broadcast_mul", "concat", "conv2d", "cross_entropy",
    "embedding_lookup", "layer_norm", "matmul", "max_pool2d", "mul", "reduce_max",
    "reduce_mean", "reduce_sum", "relu", "reshape", "sigmoid", "softmax", "sub", "transpose",
]
