"""AdamW over named numpy parameter arrays."""
from __future__ import annotations

import numpy as np


class AdamW:
    """Decoupled weight-decay Adam.

    ``step`` never mutates its inputs; it returns fresh arrays so that frozen or
    shared arrays elsewhere stay bit-identical.
    """

    def __init__(self, lr: float = 2e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.b1 * self.m.get(name, 0.0) + (1.0 - self.b1) * g
            v = self.b2 * self.v.get(name, 0.0) + (1.0 - self.b2) * g * g
            self.m[name], self.v[name] = m, v
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[name] = p - self.lr * (update + self.weight_decay * p)
        return out
