"""Reverse-mode autodiff over numpy arrays, plus optimizers."""

from . import ops, profile
from .gradcheck import finite_diff_check, relu_signs
from .ops import (
    add, add_n, batch_norm, concat, conv2d, dense, depthwise_conv2d, global_avg_pool,
    matmul, mean, mul, relu, reshape, scale, softmax, softmax_cross_entropy, take,
)
from .optim import OptimizerState, adam, cosine_lr, optimizer_step, sgd_momentum
from .tensor import (
    STOCHASTIC_OPS, Graph, Tensor, as_tensor, backward, get_default_dtype, no_grad,
    recording, set_default_dtype,
)

__all__ = [
    "Graph", "OptimizerState", "STOCHASTIC_OPS", "Tensor", "add", "add_n", "adam",
    "as_tensor", "backward", "batch_norm", "concat", "conv2d", "cosine_lr", "dense",
    "depthwise_conv2d", "finite_diff_check", "get_default_dtype", "global_avg_pool",
    "matmul", "mean", "mul", "no_grad", "ops", "optimizer_step", "profile", "recording",
    "relu", "relu_signs", "reshape", "scale", "set_default_dtype", "sgd_momentum",
    "softmax", "softmax_cross_entropy", "take",
]
