"""Minimal float64 tensor engine with reverse-mode automatic differentiation."""

from .tensor import (
    ShapeError,
    Tensor,
    add,
    apply_linear_map,
    as_tensor,
    clamp_min,
    concat,
    exp,
    grad_enabled,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    pad_zero,
    power,
    relu,
    reshape,
    stack,
    take,
    tmax,
    trace,
    transpose,
    tsum,
)
from .ops import (
    avg_pool2d,
    batch_norm,
    bilinear_matrix,
    bilinear_resample,
    conv2d,
    depthwise_conv2d,
    dropout,
    log_softmax,
    max_pool2d,
    resample_with,
    softmax_cross_entropy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
