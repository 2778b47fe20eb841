"""Adam ascent shared by the offline and online trainers."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .objectives import NumericalFailure


class TrainingDiverged(NumericalFailure):
    """Raised when an update produces a non-finite loss or parameters."""


class Adam:
    """Adam on a single parameter matrix, minimizing the supplied loss.

    Adam's per-coordinate scaling keeps one learning rate usable for both the
    offline reward scale and the much smaller online stepwise advantages.
    """

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        if not lr > 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: np.ndarray | None = None
        self._v: np.ndarray | None = None

    def step(self, theta: np.ndarray, loss_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]]) -> tuple[np.ndarray, float]:
        """One update. Returns the new parameters and the loss before the step."""
        loss, grad = loss_and_grad(theta)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(f"non-finite loss {loss} at Adam step {self.t}")
        if self._m is None:
            self._m = np.zeros_like(theta)
            self._v = np.zeros_like(theta)
        self.t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad * grad
        m_hat = self._m / (1 - self.beta1**self.t)
        v_hat = self._v / (1 - self.beta2**self.t)
        new = theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        if not np.all(np.isfinite(new)):
            raise TrainingDiverged(f"non-finite parameters after Adam step {self.t}")
        return new, loss
