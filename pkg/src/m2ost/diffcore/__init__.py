"""Minimal reverse-mode differentiable array engine used by the model."""
from .array import (
    ContractError,
    DiffArray,
    DimensionError,
    NumericError,
    add,
    as_array,
    backward,
    broadcast_to,
    channel_gate,
    concat,
    detach,
    div,
    exp,
    gelu,
    get_dtype,
    getitem,
    grad_enabled,
    grad_mask,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    no_grad,
    precision,
    reshape,
    set_dtype,
    sigmoid,
    softmax,
    softmax_rows,
    split,
    sqrt,
    square,
    sub,
    sum_,
    swapaxes,
    transpose,
)
from .gradcheck import finite_difference_check, reverse_gradients
from .optim import AdamState, adam_step
from .params import CheckpointFormatError, ParamStore, require_same_layout
from .rng import bernoulli_mask, generator

__all__ = [name for name in dir() if not name.startswith("_")]
