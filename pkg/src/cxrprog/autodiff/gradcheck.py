"""Central finite-difference gradient checking (run in float64)."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``param``; only ``coords`` (flat indices) if given."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """max |a - n| / max(|a|, |n|, floor).

    The floor keeps exactly-zero gradients (e.g. attention key biases) from
    dividing central-difference round-off, about 1e-10 at h = 1e-5, by zero.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Return the worst relative error between analytic and numeric gradients.

    ``fn`` must rebuild the scalar loss from the current parameter values.
    With ``max_coords`` only that many randomly chosen entries per parameter
    are perturbed.
    """
    for p in params:
        p.grad = None
    backward(fn())
    worst = 0.0
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            coords = np.sort(rng.choice(p.data.size, size=max_coords, replace=False))
        numeric = numeric_grad(fn, p, h, coords)
        if coords is not None:
            analytic, numeric = analytic.reshape(-1)[coords], numeric.reshape(-1)[coords]
        worst = max(worst, max_relative_error(analytic, numeric))
    return worst
