"""AdamW with decoupled weight decay."""
from __future__ import annotations

import numpy as np

from .tensors import Tensor

__all__ = ["AdamW"]


class AdamW:
    """Decoupled weight decay Adam.

    Each step first shrinks a parameter by ``lr * weight_decay`` and then
    applies the bias-corrected Adam update, so a zero gradient leaves
    ``p * (1 - lr * weight_decay)``.
    """

    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01, no_decay=()):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = {id(p) for p in no_decay}
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            if self.weight_decay and id(p) not in self.no_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
