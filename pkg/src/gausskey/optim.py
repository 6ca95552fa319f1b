"""Adam with decoupled weight decay over a flat parameter vector."""

from __future__ import annotations

import numpy as np


class AdamW:
    """In-place Adam on a 1D float64 array.

    Weight decay is decoupled: each step first shrinks the parameters by
    ``lr * weight_decay`` and then applies the bias-corrected Adam update.
    """

    def __init__(self, size, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        self.m *= b1
        self.m += (1.0 - b1) * grad
        self.v *= b2
        self.v += (1.0 - b2) * grad * grad
        m_hat = self.m / (1.0 - b1**self.t)
        v_hat = self.v / (1.0 - b2**self.t)
        if self.weight_decay:
            theta *= 1.0 - self.lr * self.weight_decay
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
