from .ops import (
    avg_pool2d,
    batch_norm,
    channel_gather,
    channel_mask,
    conv2d,
    conv_output_size,
    global_avg_pool,
    linear,
    relu,
    sigmoid_t,
    softmax_cross_entropy,
)
from .optim import SGD, Adam, cosine_lr, warmup_cosine_lr
from .tensor import DimensionError, Parameter, Tensor, as_tensor, stack_sum

__all__ = [
    "Adam",
    "DimensionError",
    "Parameter",
    "SGD",
    "Tensor",
    "as_tensor",
    "avg_pool2d",
    "batch_norm",
    "channel_gather",
    "channel_mask",
    "conv2d",
    "conv_output_size",
    "cosine_lr",
    "global_avg_pool",
    "linear",
    "relu",
    "sigmoid_t",
    "softmax_cross_entropy",
    "stack_sum",
    "warmup_cosine_lr",
]
