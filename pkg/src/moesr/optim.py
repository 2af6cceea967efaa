"""AdamW and the ramped learning-rate schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


def ramp_lr(base_lr: float, step: int, period: int = 100,
            repeat: bool = True) -> float:
    """Linear ramp 0 -> base_lr over ``period`` steps.  By default the ramp
    restarts each period (sawtooth); with ``repeat=False`` it ramps once and
    then holds at base_lr."""
    if period <= 0:
        return base_lr
    if repeat:
        phase = step % period
    else:
        phase = min(step, period - 1)
    return base_lr * (phase + 1) / period


class AdamW:
    def __init__(self, params: list[Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        if lr is None:
            lr = self.lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
