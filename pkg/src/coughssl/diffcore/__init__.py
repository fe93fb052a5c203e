"""Minimal reverse-mode tensor engine, optimizer and weight persistence."""

from .optim import OptimizerConfig, OptimizerState, adam_step, plateau_decay
from .store import ParameterStore, config_hash, load_store, save_store
from .tensor import (
    Tensor,
    add,
    backward,
    bce_with_logits,
    concat,
    div,
    dropout,
    exp,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    logsumexp,
    masked_fill,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)

__all__ = [
    "OptimizerConfig", "OptimizerState", "ParameterStore", "Tensor", "adam_step", "add", "backward",
    "bce_with_logits", "concat", "config_hash", "div", "dropout", "exp", "getitem",
    "is_grad_enabled", "layer_norm", "load_store", "log", "logsumexp", "masked_fill",
    "matmul", "mean", "mul", "neg", "no_grad", "plateau_decay", "relu", "reshape",
    "save_store", "sigmoid", "softmax", "sqrt", "stack", "sub", "sum_", "tanh", "transpose",
]
