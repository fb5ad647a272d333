"""Self-contained float64 reverse-mode autodiff over numpy storage."""

from .checker import (
    DEFAULT_STEP,
    DEFAULT_TOL,
    GradCheckEntry,
    GradCheckReport,
    NonDeterministicClosureError,
    check_gradients,
    relative_error,
)
from .ops import (
    BN_EPS,
    BN_MOMENTUM,
    NORM_FLOOR,
    absolute,
    add,
    apply,
    batch_norm,
    channel_avg_pool,
    channel_max_pool,
    concat,
    conv2d,
    dot,
    global_avg_pool,
    global_max_pool,
    l2_normalize,
    linear,
    log_softmax,
    mean,
    mul,
    registered_kinds,
    relu,
    scale,
    sigmoid,
    sub,
    tensor_sum,
)
from .tensor import (
    DiffcoreError,
    InvalidAttributeError,
    ShapeMismatchError,
    Tape,
    TapeError,
    Tensor,
    backward,
    constant,
    current_tape,
    parameter,
    tensor,
    zero_grads,
)

__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "DEFAULT_STEP",
    "DEFAULT_TOL",
    "DiffcoreError",
    "GradCheckEntry",
    "GradCheckReport",
    "InvalidAttributeError",
    "NonDeterministicClosureError",
    "NORM_FLOOR",
    "ShapeMismatchError",
    "Tape",
    "TapeError",
    "Tensor",
    "absolute",
    "add",
    "apply",
    "backward",
    "batch_norm",
    "channel_avg_pool",
    "channel_max_pool",
    "check_gradients",
    "concat",
    "constant",
    "conv2d",
    "current_tape",
    "dot",
    "global_avg_pool",
    "global_max_pool",
    "l2_normalize",
    "linear",
    "log_softmax",
    "mean",
    "mul",
    "parameter",
    "registered_kinds",
    "relative_error",
    "relu",
    "scale",
    "sigmoid",
    "sub",
    "tensor",
    "tensor_sum",
    "zero_grads",
]
