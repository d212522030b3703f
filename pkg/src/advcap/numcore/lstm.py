"""Standard LSTM cell (no peepholes), built from the tape primitives.

Gate pre-activations are computed as one stacked (4H, B) affine map and then
row-sliced in the fixed order input, forget, output, candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError
from . import tensor as nc
from .tensor import Tensor


@dataclass
class LstmParams:
    """Stacked gate weights: w_x (4H, input_dim), w_h (4H, H), b (4H,)."""
    w_x: Tensor
    w_h: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.w_h.data.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_x.data.shape[1]


def init_lstm(input_dim: int, hidden: int, stream, scale: float = 0.1, forget_bias: float = 1.0) -> LstmParams:
    """Gaussian weight init with a positive forget-gate bias."""
    w_x = Tensor(stream.normal(0.0, scale, size=(4 * hidden, input_dim)), requires_grad=True)
    w_h = Tensor(stream.normal(0.0, scale, size=(4 * hidden, hidden)), requires_grad=True)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return LstmParams(w_x, w_h, Tensor(b, requires_grad=True))


def zero_state(hidden: int, batch: int | None = None) -> tuple[Tensor, Tensor]:
    shape = (hidden,) if batch is None else (hidden, batch)
    return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def lstm_cell(x: Tensor, h: Tensor, cstate: Tensor, params: LstmParams) -> tuple[Tensor, Tensor]:
    """One LSTM step; x is (input_dim,) or (input_dim,B), h/cstate match in rank."""
    H = params.hidden
    if x.data.shape[0] != params.input_dim:
        raise ShapeError(f"lstm input dim {x.data.shape[0]} != expected {params.input_dim}")
    if h.data.shape[0] != H or cstate.data.shape[0] != H or h.data.ndim != x.data.ndim:
        raise ShapeError("lstm state shapes inconsistent with params/input")
    batched = x.data.ndim == 2
    if batched and not (x.data.shape[1] == h.data.shape[1] == cstate.data.shape[1]):
        raise ShapeError("lstm batch sizes disagree")

    z = nc.add(nc.matmul(params.w_x, x), nc.matmul(params.w_h, h))
    z = nc.add_col(z, params.b) if batched else nc.add(z, params.b)
    i = nc.sigmoid(nc.slice_rows(z, 0, H))
    f = nc.sigmoid(nc.slice_rows(z, H, 2 * H))
    o = nc.sigmoid(nc.slice_rows(z, 2 * H, 3 * H))
    g = nc.tanh(nc.slice_rows(z, 3 * H, 4 * H))
    c_new = nc.add(nc.mul(f, cstate), nc.mul(i, g))
    h_new = nc.mul(o, nc.tanh(c_new))
    return h_new, c_new
