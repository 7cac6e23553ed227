"""Minimal reverse-mode autodiff over numpy arrays."""

from .core import GraphError, NonFiniteError, ShapeError, Tensor, TensorError, as_tensor
from .gradcheck import analytic_gradient, grad_check, numerical_gradient, relative_error
from .io import (
    TensorFormatError,
    load_tensor,
    read_tensor,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
    write_tensor,
)
from .ops import (
    abs,
    add,
    avg_pool2d,
    conv2d,
    div,
    elementwise,
    embedding,
    exp,
    expand,
    log,
    matmul,
    mul,
    neg,
    reduce,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    sub,
    transpose,
    upsample_nearest,
)

__all__ = [
    "Tensor", "TensorError", "ShapeError", "NonFiniteError", "GraphError", "TensorFormatError",
    "as_tensor", "grad_check", "analytic_gradient", "numerical_gradient", "relative_error",
    "abs", "add", "avg_pool2d", "conv2d", "div", "elementwise", "embedding", "exp", "expand",
    "log", "matmul", "mul", "neg", "reduce", "relu", "reshape", "scale", "sigmoid", "softplus", "sub",
    "transpose", "upsample_nearest",
    "load_tensor", "read_tensor", "save_tensor", "tensor_from_bytes", "tensor_to_bytes", "write_tensor",
]
