"""Loss evaluation carrier and the shared first-order optimizer.

Every pipeline minimizes its objective with the same moment-based optimizer
(Adam-style per-parameter step scaling) plus a geometric learning-rate decay;
the best parameters seen so far are retained so the reported objective trace
is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceDetected


@dataclass
class LossEvaluation:
    """Scalar objective value plus its gradient over the active parameter block."""

    value: float
    gradient: np.ndarray

    def __post_init__(self):
        self.value = float(self.value)
        self.gradient = np.asarray(self.gradient, dtype=float)


class MomentOptimizer:
    """Adam-style optimizer over a flat parameter block.

    ``step(gradient)`` returns the update to *subtract* from the parameters
    (callers owning manifold parameters apply it through their retraction).
    The learning rate decays geometrically from ``learning_rate`` to
    ``learning_rate * final_lr_fraction`` over ``total_steps``.
    """

    def __init__(
        self,
        size: int,
        learning_rate: float = 1e-3,
        total_steps: int | None = None,
        final_lr_fraction: float = 0.01,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.learning_rate = float(learning_rate)
        self.total_steps = total_steps
        self.final_lr_fraction = float(final_lr_fraction)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def current_lr(self) -> float:
        if not self.total_steps or self.total_steps <= 1:
            return self.learning_rate
        frac = min(1.0, self.t / (self.total_steps - 1))
        return self.learning_rate * self.final_lr_fraction**frac

    def step(self, gradient: np.ndarray) -> np.ndarray:
        lr = self.current_lr()
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * gradient
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * gradient**2
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        return lr * m_hat / (np.sqrt(v_hat) + self.eps)


def check_finite_objective(value: float, context: str) -> None:
    if not np.isfinite(value):
        raise DivergenceDetected(f"{context}: objective became {value}")
