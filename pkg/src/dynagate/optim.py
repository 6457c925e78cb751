"""Adam with bias correction and a polynomial decay schedule."""

from __future__ import annotations

import numpy as np

from .errors import ContractError


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        if lr <= 0:
            raise ContractError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / b1t
            v_hat = self.v[i] / b2t
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class PolyLR:
    """lr(step) = (base - floor) * (1 - step/total)^power + floor."""

    def __init__(self, optimizer: Adam, total_steps: int, power: float = 0.9,
                 min_lr: float = 0.0):
        if total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {total_steps}")
        self.optimizer = optimizer
        self.base_lr = optimizer.lr
        self.total_steps = total_steps
        self.power = power
        self.min_lr = min_lr

    def lr_at(self, step: int) -> float:
        frac = min(max(step, 0), self.total_steps) / self.total_steps
        return (self.base_lr - self.min_lr) * (1.0 - frac) ** self.power + self.min_lr

    def set_step(self, step: int) -> float:
        lr = self.lr_at(step)
        self.optimizer.lr = lr
        return lr
