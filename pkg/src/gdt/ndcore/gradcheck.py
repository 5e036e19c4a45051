"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import ComputationTape, Tensor


def finite_difference_check(params: dict[str, Tensor],
                            loss_fn: Callable[[], Tensor],
                            h: float = 1e-3,
                            denom_floor: float = 1e-6) -> dict[str, float]:
    """Max relative error per parameter between tape grads and central differences.

    loss_fn must be a deterministic closure over `params` (run forwards in eval
    mode; dropout would make the two FD evaluations disagree). Relative error is
    |a - n| / max(|a|, |n|, denom_floor) per element.
    """
    for p in params.values():
        p.zero_grad()
    with ComputationTape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    errs: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(loss_fn().data)
            flat[i] = orig - h
            dn = float(loss_fn().data)
            flat[i] = orig
            numeric = (up - dn) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), denom_floor)
            worst = max(worst, rel)
        errs[name] = worst
    return errs
