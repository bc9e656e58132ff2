"""Adam / AdamW with bias correction."""

from __future__ import annotations

import numpy as np

from .layers import Parameter


class Adam:
    """Standard Adam; set decoupled_weight_decay for AdamW behavior."""

    def __init__(self, params: list[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decoupled_weight_decay: bool = False):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled_weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            if self.weight_decay and self.decoupled:
                update = update + self.weight_decay * p.data
            p.data -= (self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def adam_step(opt: Adam, grads: list[np.ndarray] | None = None):
    """Functional wrapper: assign grads (optional) and apply one update."""
    if grads is not None:
        if len(grads) != len(opt.params):
            raise ValueError("grads length mismatch")
        for p, g in zip(opt.params, grads):
            p.grad = np.asarray(g, dtype=p.data.dtype)
    opt.step()
