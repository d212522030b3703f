"""Central finite-difference gradient checker.

Used both as a dev tool and as the gradient oracle in the test suite: an
analytic gradient is trusted when it matches central differences elementwise.
The numeric quotient divides by the actually-stored step (x_hi - x_lo), which
removes the step-representation error and makes exactly-linear functions
check out with zero error on dyadic inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tape, Tensor, backward

# Gradients smaller than this floor are compared absolutely (tol * floor).
REL_FLOOR = 1e-4


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    reliable: bool       # False if f returned different values on repeat evaluation
    worst_index: int
    analytic: np.ndarray
    numeric: np.ndarray

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        rel = "" if self.reliable else " [UNRELIABLE: f is not deterministic]"
        return f"gradcheck {status}: max rel err {self.max_rel_err:.3e} at flat index {self.worst_index}{rel}"


def finite_diff_check(f, x: Tensor, tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare the taped gradient of scalar-valued ``f`` at ``x`` to central differences."""
    v1 = float(f(x).data)
    v2 = float(f(x).data)
    reliable = v1 == v2

    was = x.requires_grad
    x.requires_grad = True
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
    backward(tape, y)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.zero_grad()
    x.requires_grad = was

    flat = x.data.ravel()
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi_x = flat[i]
        hi = float(f(x).data)
        flat[i] = orig - step
        lo_x = flat[i]
        lo = float(f(x).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (hi_x - lo_x)
    numeric = numeric.reshape(x.data.shape)

    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    rel = diff / denom
    worst = int(np.argmax(rel)) if rel.size else 0
    max_rel = float(rel.ravel()[worst]) if rel.size else 0.0
    return GradCheckReport(
        max_rel_err=max_rel,
        passed=reliable and max_rel <= tol,
        reliable=reliable,
        worst_index=worst,
        analytic=analytic,
        numeric=numeric,
    )


def check_param_grads(build_loss, params: dict[str, Tensor], tol: float = 1e-4,
                      step: float = 1e-5) -> dict[str, GradCheckReport]:
    """Run finite_diff_check for each named parameter of a loss builder.

    ``build_loss()`` must re-run the full forward pass and return a scalar
    Tensor; parameters are perturbed in place between calls.
    """
    reports = {}
    for name, p in params.items():
        reports[name] = finite_diff_check(lambda _x, b=build_loss: b(), p, tol=tol, step=step)
    return reports
