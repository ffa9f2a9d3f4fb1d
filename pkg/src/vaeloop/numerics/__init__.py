"""Dense float64 tensors with reverse-mode automatic differentiation."""

from . import kernels
from .gradcheck import GradCheckReport, check_gradients, numeric_gradient
from .nn import (BatchNormState, batch_norm, conv1d, conv_output_length, dropout,
                 embedding, global_max_pool_time, time_mask)
from .tensor import (Tape, Tensor, activation, add, as_tensor, backward, broadcast_rows, clip, concat,
                     exp, getitem, grad_enabled, linear, log, matmul, mean, mul, no_grad,
                     record, record1, relu, reshape, sigmoid, softmax, softplus, square,
                     stack, sub, sum, tanh, tile_last, transpose, unbroadcast)

__all__ = [
    "BatchNormState", "GradCheckReport", "Tape", "Tensor", "activation", "add", "as_tensor", "backward",
    "batch_norm", "broadcast_rows", "check_gradients", "clip", "concat", "conv1d", "conv_output_length", "dropout", "embedding",
    "exp", "getitem", "global_max_pool_time", "grad_enabled", "kernels", "linear", "log",
    "matmul", "mean", "mul", "no_grad", "numeric_gradient", "record", "record1", "relu", "reshape", "sigmoid",
    "softmax", "softplus", "square", "stack", "sub", "sum", "tanh", "tile_last", "time_mask", "transpose",
    "unbroadcast",
]
