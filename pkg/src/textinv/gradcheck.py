"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor


def numerical_grad(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-3) -> np.ndarray:
    """d fn() / d leaf by central differences, perturbing ``leaf.data`` in place."""
    grad = np.zeros(leaf.shape, dtype=np.float64)
    flat = leaf.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data.sum())
        flat[i] = orig - h
        fm = float(fn().data.sum())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||); 0 when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], leaves: Sequence[Tensor], h: float = 1e-3) -> float:
    """Worst relative error between autodiff and finite differences over ``leaves``."""
    for leaf in leaves:
        leaf.grad = None
    out = fn()
    if out.size != 1:
        out = out.sum()
    out.backward()
    worst = 0.0
    for leaf in leaves:
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, leaf, h)))
    return worst
