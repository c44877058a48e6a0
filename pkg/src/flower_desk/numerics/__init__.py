from . import kernels
from .gradcheck import grad_check
from .rng import SeededRng
from .tensor import (
    Parameter,
    Tape,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    concat,
    default_dtype,
    div,
    dropout,
    elementwise,
    elu_plus_one,
    embedding,
    exp,
    get_tape,
    getitem,
    grad_enabled,
    linear,
    matmul,
    mul,
    multiply_count,
    no_grad,
    precision,
    reduce,
    reduce_max,
    reduce_mean,
    reduce_sum,
    reshape,
    rms_norm,
    rope,
    set_default_dtype,
    sigmoid,
    silu,
    softmax,
    split,
    sqrt,
    square,
    sub,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
