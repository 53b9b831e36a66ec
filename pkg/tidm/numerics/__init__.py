from .gradcheck import GradCheckResult, finite_difference_check
from .optim import Adam
from .params import ParamStore
from .rng import Rng, sample_standard_normal
from .tensor import (
    Tensor,
    add,
    as_tensor,
    attention,
    avg_pool2d,
    backpropagate,
    compute_dtype,
    concat,
    conv2d,
    cross_entropy,
    downsample,
    float64_precision,
    group_norm,
    linear,
    matmul,
    mean_all,
    mse,
    mul,
    no_grad,
    reshape,
    scale,
    silu,
    softmax,
    sub,
    sum_all,
    swap_last,
    take_rows,
    transpose,
    upsample_nearest,
)

__all__ = [
    "Adam",
    "GradCheckResult",
    "ParamStore",
    "Rng",
    "Tensor",
    "add",
    "as_tensor",
    "attention",
    "avg_pool2d",
    "backpropagate",
    "compute_dtype",
    "concat",
    "conv2d",
    "cross_entropy",
    "downsample",
    "finite_difference_check",
    "float64_precision",
    "group_norm",
    "linear",
    "matmul",
    "mean_all",
    "mse",
    "mul",
    "no_grad",
    "reshape",
    "sample_standard_normal",
    "scale",
    "silu",
    "softmax",
    "sub",
    "sum_all",
    "swap_last",
    "take_rows",
    "transpose",
    "upsample_nearest",
]
