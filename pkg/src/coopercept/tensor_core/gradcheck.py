"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, default_dtype


def numerical_grad(fn: Callable[[], Tensor], arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """d fn() / d arr by central differences; ``arr`` is perturbed in place and restored."""
    grad = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data.sum(dtype=np.float64))
        flat[i] = orig - h
        fm = float(fn().data.sum(dtype=np.float64))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |analytic - numeric| / (max |numeric| + 1e-8)."""
    diff = np.max(np.abs(np.asarray(analytic, np.float64) - numeric)) if numeric.size else 0.0
    return float(diff / (np.max(np.abs(numeric), initial=0.0) + 1e-8))


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> float:
    """Worst relative error between backward() and finite differences over ``inputs``.

    ``fn`` must rebuild the graph from the current values of ``inputs`` on each call
    and return a scalar (or a tensor that is summed). Run under float64.
    """
    for t in inputs:
        t.grad = None
    out = fn()
    loss = out if out.data.size == 1 else out.sum()
    loss.backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numerical_grad(fn, t.data, h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


__all__ = ["numerical_grad", "relative_error", "check_gradients", "default_dtype"]
