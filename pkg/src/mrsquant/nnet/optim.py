from __future__ import annotations

import math

import numpy as np


def step_lr(iteration: int, lr0: float = 1e-3, gamma: float = 0.5, step: int = 1) -> float:
    """Step decay ``lr0 * gamma ** floor(iteration / step)``."""
    return lr0 * gamma ** (iteration // step)


class Adam:
    """Adam with bias correction; the learning rate is passed per step."""

    def __init__(self, params: list[np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        lr_t = lr * math.sqrt(c2) / c1
        eps_t = self.eps * math.sqrt(c2)
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            # lr * mhat / (sqrt(vhat) + eps) with both corrections folded in
            denom = np.sqrt(v)
            denom += eps_t
            np.divide(m, denom, out=denom)
            denom *= lr_t
            p -= denom.astype(p.dtype, copy=False)
