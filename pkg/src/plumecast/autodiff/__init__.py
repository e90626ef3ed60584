"""Dense NHWC tensors with reverse-mode differentiation."""
from .gradcheck import finite_diff_check
from .ops import (
    BatchNormState,
    NoValidCellsError,
    add,
    avg_pool2d,
    batch_norm,
    broadcast_to,
    concat,
    conv2d,
    getitem,
    log1p,
    lstm_cell,
    masked_msle,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    stack,
    sub,
    tanh,
    unstack,
    upsample_nearest2d,
)
from .optim import Adam, NonFiniteGradientError
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "Adam", "BatchNormState", "NoValidCellsError", "NonFiniteGradientError", "ShapeError",
    "Tensor", "add", "avg_pool2d", "batch_norm", "broadcast_to", "concat", "conv2d",
    "finite_diff_check", "getitem", "log1p", "lstm_cell", "masked_msle", "mean", "mul",
    "no_grad", "relu", "reshape", "sigmoid", "stack", "sub", "tanh", "unstack", "upsample_nearest2d",
]
