"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .autograd import Tensor, default_dtype


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def check_gradients(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    max_entries: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    ``f`` recomputes a scalar from the current contents of ``params``; every
    param must already hold float64 data.  When ``max_entries`` is given, at
    most that many randomly chosen coordinates per param are probed.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("check_gradients needs float64 parameters")
    with default_dtype(np.float64):
        for p in params:
            p.grad = None
        out = f()
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("objective is not finite at the probe point")
        out.backward()
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

        rng = np.random.default_rng(seed)
        worst = 0.0
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = rng.choice(flat.size, size=max_entries, replace=False)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    raise FloatingPointError("objective is not finite near the probe point")
                numeric = (up - down) / (2 * h)
                worst = max(worst, float(relative_error(np.float64(grad.reshape(-1)[i]), np.float64(numeric))))
        for p in params:
            p.grad = None
    return worst
