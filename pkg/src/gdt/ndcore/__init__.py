from .tensor import (
    ComputationTape,
    ShapeError,
    TapeError,
    Tensor,
    add,
    concat,
    conv2d_valid,
    cross_entropy_logits,
    dropout,
    gather_cols,
    gather_rows,
    gelu,
    layernorm,
    linear,
    matmul,
    mean_,
    mse_masked,
    mul,
    neg,
    relu,
    reshape,
    slice_axis,
    softmax_lastdim,
    sub,
    sum_,
    tanh,
    transpose,
)
from .optim import (
    AdamState,
    OptimError,
    ScheduleConfig,
    adam_step,
    clip_by_global_norm,
    global_grad_norm,
    lr_schedule,
)
from .gradcheck import finite_difference_check
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "ComputationTape", "ShapeError", "TapeError", "Tensor",
    "add", "concat", "conv2d_valid", "cross_entropy_logits", "dropout",
    "gather_cols", "gather_rows", "gelu", "layernorm", "linear", "matmul",
    "mean_", "mse_masked", "mul", "neg", "relu", "reshape", "slice_axis",
    "softmax_lastdim", "sub", "sum_", "tanh", "transpose",
    "AdamState", "OptimError", "ScheduleConfig", "adam_step",
    "clip_by_global_norm", "global_grad_norm", "lr_schedule",
    "finite_difference_check",
    "Checkpoint", "CheckpointError", "load_checkpoint", "save_checkpoint",
]
