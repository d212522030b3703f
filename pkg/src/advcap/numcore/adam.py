"""ADAM optimizer with bias correction; eps fixed at 1e-8."""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


class AdamState:
    """Per-parameter first/second moments plus a shared step counter."""

    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in params]
        self.second_moment = [np.zeros_like(p.data) for p in params]


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: AdamState) -> None:
    """One in-place ADAM update. Missing gradients count as zero."""
    if len(params) != len(state.first_moment):
        raise ShapeError("param list does not match optimizer state")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper binding an AdamState to a named parameter dict."""

    def __init__(self, named_params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999):
        self.names = list(named_params.keys())
        self.params = [named_params[n] for n in self.names]
        self.state = AdamState(self.params, lr=lr, beta1=beta1, beta2=beta2)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    # checkpoint support -----------------------------------------------------

    def named_state_tensors(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for n, m, v in zip(self.names, self.state.first_moment, self.state.second_moment):
            out[f"{prefix}.{n}.m"] = m
            out[f"{prefix}.{n}.v"] = v
        return out

    def load_state_tensors(self, prefix: str, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for i, n in enumerate(self.names):
            self.state.first_moment[i][...] = tensors[f"{prefix}.{n}.m"]
            self.state.second_moment[i][...] = tensors[f"{prefix}.{n}.v"]
        self.state.step_count = int(step_count)
