"""Central finite-difference gradient checking for the loss implementations."""

from __future__ import annotations

import numpy as np


def central_difference(fn, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar function at ``x0``."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.empty(x0.size)
    flat = x0.ravel().copy()
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        f_plus = fn(flat.reshape(x0.shape))
        flat[k] = orig - h
        f_minus = fn(flat.reshape(x0.shape))
        flat[k] = orig
        grad[k] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(x0.shape)


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation, scaled by the gradient magnitude (floored at 1)."""
    analytic = np.asarray(analytic, dtype=float).ravel()
    numeric = np.asarray(numeric, dtype=float).ravel()
    scale = max(1.0, float(np.max(np.abs(analytic)) if analytic.size else 0.0),
                float(np.max(np.abs(numeric)) if numeric.size else 0.0))
    return float(np.max(np.abs(analytic - numeric))) / scale if analytic.size else 0.0
