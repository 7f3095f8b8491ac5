"""Finite-difference check of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np


def grad_check(params: dict, loss_fn: Callable[[dict], tuple[float, dict]], eps: float = 1e-4,
               per_tensor: bool = False):
    """Central differences over every entry of every tensor.

    ``loss_fn(params) -> (loss, grads)``. The error for a tensor is
    ``|g_a - g_n| / max(|g_a| + |g_n|, 1e-6)`` in the 2-norm; returns the
    maximum over tensors, or the per-tensor dict when ``per_tensor``.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = loss_fn(params)
    errors = {}
    for name in sorted(params):
        p = params[name]
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(params)[0]
            flat[i] = orig - eps
            down = loss_fn(params)[0]
            flat[i] = orig
            nflat[i] = (up - down) / (2 * eps)
        ga = analytic.get(name, np.zeros_like(p))
        denom = max(np.linalg.norm(ga) + np.linalg.norm(num), 1e-6)
        errors[name] = float(np.linalg.norm(ga - num) / denom)
    if per_tensor:
        return errors
    return max(errors.values()) if errors else 0.0
