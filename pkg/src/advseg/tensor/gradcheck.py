from __future__ import annotations

from typing import Callable

import numpy as np

from .core import ShapeError, Tensor


def numerical_gradient(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = _scalar(fn(Tensor(x)))
        flat[i] = orig - h
        fm = _scalar(fn(Tensor(x)))
        flat[i] = orig
        grad.reshape(-1)[i] = (fp - fm) / (2 * h)
    return grad


def analytic_gradient(fn: Callable[[Tensor], Tensor], point) -> np.ndarray:
    x = Tensor(point.data if isinstance(point, Tensor) else point, requires_grad=True, dtype=np.float64)
    out = fn(x)
    if out.size != 1 or out.ndim != 0:
        raise ShapeError(f"function must return a scalar, got shape {out.shape}")
    if not out.requires_grad:
        return np.zeros_like(x.data)
    out.backward()
    return x.grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def grad_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients."""
    if h <= 0:
        raise ValueError("step h must be positive")
    analytic = analytic_gradient(fn, point)
    numeric = numerical_gradient(fn, point, h)
    return relative_error(analytic, numeric)


def _scalar(t: Tensor) -> float:
    if t.size != 1 or t.ndim != 0:
        raise ShapeError(f"function must return a scalar, got shape {t.shape}")
    return float(t.data)
