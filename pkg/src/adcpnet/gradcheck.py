"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_record


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-4,
    coords: Optional[Sequence[tuple]] = None,
) -> float:
    """Max relative error between the taped gradient and central differences.

    ``f`` maps ``x`` (and whatever it closes over) to a scalar tensor. The
    error at a coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    ``coords`` restricts the comparison to a subset of ``x``'s indices.
    """
    was = x.requires_grad
    x.requires_grad = True
    x.grad = np.zeros_like(x.data)
    with Tape() as tape:
        loss = f(x)
    backward(tape, loss)
    analytic = x.grad.copy()
    x.requires_grad = was
    x.grad = np.zeros_like(x.data) if was else None

    if coords is None:
        coords = list(np.ndindex(*x.shape))
    worst = 0.0
    with no_record():
        for idx in coords:
            orig = x.data[idx]
            x.data[idx] = orig + eps
            fp = float(f(x).data)
            x.data[idx] = orig - eps
            fm = float(f(x).data)
            x.data[idx] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(analytic[idx] - num) / (abs(analytic[idx]) + 1e-8)
            worst = max(worst, err)
    return worst
