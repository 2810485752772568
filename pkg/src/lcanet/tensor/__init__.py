from .core import (
    DimensionError,
    NumericError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    clear_faults,
    inject_fault,
)
from .ops import (
    add,
    concat,
    div,
    exp,
    getitem,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    pointwise,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    square,
    stack,
    sub,
    sum,
    take,
    tanh,
    transpose,
)
from .conv import batch_norm, conv3d, conv_output_shape, dropout, maxpool3d, pool_output_shape
from .gradcheck import gradcheck, gradcheck_detail, rel_error

__all__ = [name for name in dir() if not name.startswith("_")]
