"""Minimal reverse-mode differentiation engine."""

from . import ops
from .gradcheck import GradCheckReport, grad_check, grad_check_report
from .nadam import NadamState, nadam_step
from .ops import (
    RunningStats,
    avgpool3,
    batch_norm,
    concat_channels,
    conv2d,
    dropout,
    elu,
    global_avg_pool,
    linear,
    maxpool2,
    sigmoid,
    slice_channels,
    softmax_channels,
    upsample_nearest2,
)
from .tensor import Parameter, Tape, Tensor, backward, current_tape, record_op

__all__ = [
    "NadamState",
    "Parameter",
    "RunningStats",
    "Tape",
    "Tensor",
    "avgpool3",
    "backward",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "current_tape",
    "dropout",
    "elu",
    "global_avg_pool",
    "GradCheckReport",
    "grad_check",
    "grad_check_report",
    "linear",
    "maxpool2",
    "nadam_step",
    "ops",
    "record_op",
    "sigmoid",
    "slice_channels",
    "softmax_channels",
    "upsample_nearest2",
]
