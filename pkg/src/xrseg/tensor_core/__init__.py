"""Minimal NCHW tensor library with tape-based reverse-mode differentiation."""

from .gradcheck import gradcheck, numerical_grad, relative_error
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    RunningStats,
    activation,
    add,
    batchnorm2d,
    concat_channels,
    conv2d,
    conv_output_size,
    maxpool2d_indices,
    maxunpool2d,
    mean_all,
    mul,
    relu,
    sigmoid,
    sum_all,
    upsample_nearest2x,
)
from .tensor import DEFAULT_DTYPE, Node, ShapeError, Tape, Tensor, active_tape, as_tensor, backward, no_grad, record_op

__all__ = [name for name in dir() if not name.startswith("_")]
