"""Dense-tensor arithmetic, reverse-mode autodiff and momentum SGD."""

from .tensor import (
    DTYPE,
    NumericError,
    ShapeError,
    Tensor,
    absolute,
    add,
    clip,
    concat,
    constant,
    conv2d,
    gather_labels,
    l1_distance,
    logsumexp,
    matmul,
    maxpool2d,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    tanh,
    tmean,
    tsum,
)
from .params import ParamVector, backward
from .optim import MomentumSGD
from .checkpoint import CheckpointError, load_params, load_segments, save_params, save_segments
from .seeds import derive_seed, make_rng

__all__ = [
    "DTYPE", "NumericError", "ShapeError", "Tensor",
    "absolute", "add", "clip", "concat", "constant", "conv2d", "gather_labels",
    "l1_distance", "logsumexp", "matmul", "maxpool2d", "mul", "relu", "reshape",
    "scale", "sigmoid", "softmax", "softmax_cross_entropy", "tanh", "tmean", "tsum",
    "ParamVector", "backward", "MomentumSGD",
    "CheckpointError", "load_params", "load_segments", "save_params", "save_segments",
    "derive_seed", "make_rng",
]
