from tdtmle.autodiff.tensor import (
    GradientError,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    backward,
)
from tdtmle.autodiff.ops import (
    EPS_PROB,
    add,
    bce,
    concat,
    dropout,
    exp,
    expand,
    gelu,
    index_select,
    layer_norm,
    linear,
    log,
    matmul,
    mul,
    narrow,
    neg,
    reshape,
    scale,
    sigmoid,
    softmax_masked,
    stop_gradient,
    sub,
    tanh,
    transpose,
    vmean,
    vsum,
)
from tdtmle.autodiff.optim import Adam
from tdtmle.autodiff.gradcheck import check_gradient

__all__ = [
    "Adam",
    "EPS_PROB",
    "GradientError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "bce",
    "check_gradient",
    "concat",
    "dropout",
    "exp",
    "expand",
    "gelu",
    "index_select",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mul",
    "narrow",
    "neg",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_masked",
    "stop_gradient",
    "sub",
    "tanh",
    "transpose",
    "vmean",
    "vsum",
]
