"""Tape-based reverse-mode autodiff, LSTM cell, ADAM, and gradient checking."""

from .adam import Adam, AdamState, adam_step
from .gradcheck import GradCheckReport, check_param_grads, finite_diff_check
from .lstm import LstmParams, init_lstm, lstm_cell, zero_state
from .tensor import (
    Tape,
    Tensor,
    activation,
    add,
    add_col,
    add_scalar,
    affine,
    as_tensor,
    stack_scalars,
    backward,
    clamp,
    concat,
    concat_cols,
    conv_bank,
    conv_full_height,
    current_tape,
    dot,
    dot_cols,
    gather_embedding,
    log,
    matmul,
    max_over_time,
    max_over_time_rows,
    mean_all,
    mul,
    relu,
    sigmoid,
    slice_rows,
    softmax_xent,
    softmax_xent_cols,
    sum_all,
    tanh,
)

__all__ = [
    "Adam", "AdamState", "adam_step",
    "GradCheckReport", "check_param_grads", "finite_diff_check",
    "LstmParams", "init_lstm", "lstm_cell", "zero_state",
    "Tape", "Tensor", "activation", "add", "add_col", "add_scalar", "affine",
    "as_tensor", "backward", "clamp", "concat", "concat_cols", "conv_bank",
    "conv_full_height", "current_tape", "dot", "dot_cols", "gather_embedding",
    "log", "matmul", "max_over_time", "max_over_time_rows", "mean_all", "mul",
    "relu", "sigmoid", "slice_rows", "softmax_xent", "softmax_xent_cols",
    "stack_scalars", "sum_all", "tanh",
]
