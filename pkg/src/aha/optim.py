"""First-moment/second-moment optimizers and the warmup-cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


class Adam:
    """Adam over a fixed parameter list; state is keyed by list position."""

    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay  # decoupled (AdamW-style) when nonzero
        self.t = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def _ensure_state(self, params: list[Tensor]) -> None:
        while len(self.m) < len(params):
            i = len(self.m)
            self.m.append(np.zeros_like(params[i].values))
            self.v.append(np.zeros_like(params[i].values))

    def step(self, params: list[Tensor]) -> None:
        """Apply one update using each param's current ``.grad``."""
        self._ensure_state(params)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            update = (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + self.eps)
            new_values = p.values - self.lr * update
            if self.weight_decay:
                new_values = new_values - self.lr * self.weight_decay * p.values
            p.values = new_values  # rebind: graphs built earlier keep their arrays


class AdamW(Adam):
    def __init__(self, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        super().__init__(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)


def warmup_cosine_lr(step: int, total_steps: int, warmup_steps: int,
                     lr: float, min_lr: float) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``min_lr``."""
    if total_steps <= 0:
        return lr
    if warmup_steps > 0 and step < warmup_steps:
        return lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = min((step - warmup_steps) / span, 1.0)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * frac))
