"""Minimal reverse-mode differentiation for the dose and denoiser networks."""

from .gradcheck import GradCheckReport, grad_check
from .ops import (add, concat, conv2d, dense, downsample2x, global_mean_pool, leaky_relu, linear_map, mul,
                  reduce_mean, reduce_sum, relu, reshape, scale)
from .params import NetworkParams, adam_step, load_checkpoint, save_checkpoint
from .tensor import BackwardError, Tape, Tensor, as_tensor, backward, make_output

__all__ = [
    "BackwardError", "GradCheckReport", "NetworkParams", "Tape", "Tensor", "adam_step", "add",
    "as_tensor", "backward", "concat", "conv2d", "dense", "downsample2x", "global_mean_pool", "grad_check",
    "leaky_relu", "linear_map", "load_checkpoint", "make_output", "mul", "reduce_mean",
    "reduce_sum", "relu", "reshape", "save_checkpoint", "scale",
]
