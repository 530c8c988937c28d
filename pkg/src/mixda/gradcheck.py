"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    n_coords: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-4,
) -> GradCheckReport:
    """Compare backward gradients of ``f()`` with central differences.

    The relative error denominator is ``max(|analytic|, |numeric|, floor)``,
    so coordinates with near-zero gradient are judged on absolute error.
    """
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = np.zeros_like(p.data)
    backward(f())
    analytic = [p.grad.copy() for p in params]

    max_rel = max_abs = 0.0
    n = 0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        ga = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = f().item()
            flat[i] = orig - eps
            down = f().item()
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            err = abs(ga[i] - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(ga[i]), abs(num), floor))
            n += 1
    return GradCheckReport(max_rel, max_abs, n)
