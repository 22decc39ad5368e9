"""Tape-style reverse-mode autodiff with second-order support."""

from .optim import AdamState, adam_step, sgd_step
from .params import ParamSet, backward, load_checkpoint, save_checkpoint
from .tensor import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    conv1d_dilated,
    div,
    embed,
    exp,
    getitem,
    grad,
    graph_of,
    is_grad_enabled,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    set_grad_enabled,
    sigmoid,
    softplus,
    square,
    sub,
    sum_,
    tanh,
    transpose,
)

__all__ = [
    "AdamState", "ParamSet", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "broadcast_to", "concat", "conv1d_dilated", "div", "embed", "exp", "getitem", "grad",
    "graph_of", "is_grad_enabled", "load_checkpoint", "log", "matmul", "mean", "mul", "neg",
    "no_grad", "power", "relu", "reshape", "save_checkpoint", "set_grad_enabled", "sgd_step",
    "sigmoid", "softplus", "square", "sub", "sum_", "tanh", "transpose",
]
