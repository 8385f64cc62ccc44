"""AdamW with decoupled weight decay.

Decay is applied multiplicatively to the parameter before the
bias-corrected Adam delta, so a zero gradient with nonzero decay still
shrinks the parameter by exactly lr * wd per step.  Parameters are
visited in sorted name order for reproducibility.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .nnbase import Param


class AdamW:
    def __init__(self, params: dict[str, Param], lr=1e-3, beta1=0.9,
                 beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = beta1, beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad
            if g.shape != p.value.shape:
                raise ShapeMismatch(f"gradient shape mismatch for {name}")
            if self.weight_decay:
                p.value *= (1.0 - self.lr * self.weight_decay)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
