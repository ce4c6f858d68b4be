"""Central finite-difference verification of the reverse pass."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError
from .tensor import Parameter, Tensor, backward, no_grad, zero_grad

REL_FLOOR = 1e-8


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    loss_fn rebuilds the scalar loss from the current parameter values.
    Every scalar in every parameter is perturbed by +-h, so this is
    only for tiny configurations, and it demands 64-bit parameters
    (32-bit round-off would drown the comparison).
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise NumericError(f"finite_diff_check needs 64-bit parameters, {p.name} is {p.data.dtype}")
    zero_grad(params)
    loss = loss_fn()
    backward(loss)
    analytic = {
        p.name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params
    }
    zero_grad(params)

    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            grads = analytic[p.name].reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                plus = float(loss_fn().data)
                flat[i] = saved - h
                minus = float(loss_fn().data)
                flat[i] = saved
                numeric = (plus - minus) / (2.0 * h)
                a = float(grads[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_FLOOR)
                if rel > worst:
                    worst = rel
    return worst
