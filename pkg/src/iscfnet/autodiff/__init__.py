"""Minimal dense-tensor engine with reverse-mode automatic differentiation."""

from .gradcheck import grad_check
from .ops import (
    AllocationStats,
    GELU_C0,
    GELU_C1,
    add,
    bce_with_logits,
    concat,
    conv2d,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    permute,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    sigmoid,
    softmax,
    track_allocations,
    transpose_last,
)
from .tensor import (
    CountMismatch,
    DetachedFromTape,
    Gradients,
    InvalidPermutation,
    NonIntegralOutputExtent,
    NotScalar,
    Parameter,
    ShapeMismatch,
    Tape,
    Tensor,
    active_tape,
    backward,
    tensor,
)

__all__ = [
    "AllocationStats",
    "CountMismatch",
    "DetachedFromTape",
    "GELU_C0",
    "GELU_C1",
    "Gradients",
    "InvalidPermutation",
    "NonIntegralOutputExtent",
    "NotScalar",
    "Parameter",
    "ShapeMismatch",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "bce_with_logits",
    "concat",
    "conv2d",
    "gelu",
    "grad_check",
    "layer_norm",
    "linear",
    "matmul",
    "mul",
    "permute",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "tensor",
    "track_allocations",
    "transpose_last",
]
