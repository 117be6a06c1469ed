"""Finite-difference verification of analytic gradients.

The check perturbs one coordinate at a time with a central difference whose
step scales with the coordinate magnitude, and reports the worst relative
disagreement with the recorded analytic gradient.  For large tensors a
random subset of coordinates is sampled.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import UsageError
from .tensor import Tensor, backward


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor,
               h_scale: float = 1e-3,
               rng: np.random.Generator | None = None,
               max_coords: int = 100) -> float:
    """Max over sampled coordinates of |analytic - central| / max(1, |central|).

    ``f`` must be a deterministic map from ``x`` to a scalar Tensor; it may
    close over other (fixed) tensors.  ``x.data`` is restored on exit.
    """
    if not x.requires_grad:
        raise UsageError("grad_check target must have requires_grad=True")
    x.zero_grad()
    y = f(x)
    if y.size != 1:
        raise UsageError("grad_check probe must return a scalar")
    backward(y, leaves=[x])
    analytic = x.grad.copy()

    n = x.data.size
    flat = x.data.reshape(-1)
    if n <= max_coords:
        coords = np.arange(n)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(n, size=max_coords, replace=False)

    worst = 0.0
    aflat = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        h = h_scale * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f(x).item()
        flat[i] = orig - h
        fm = f(x).item()
        flat[i] = orig
        central = (fp - fm) / (2.0 * h)
        err = abs(aflat[i] - central) / max(1.0, abs(central))
        if err > worst:
            worst = err
    return worst
