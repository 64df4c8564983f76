"""First-order optimizers over lists of numpy arrays, updated in place."""

from __future__ import annotations

import math

import numpy as np


class Optimizer:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr
        self.t = 0

    def step(self, grads: list[np.ndarray], lr: float | None = None) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr=1e-3, momentum=0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for p, g, v in zip(self.params, grads, self.velocity):
            if self.momentum:
                v *= self.momentum
                v += g
                g = v
            p -= lr * g


class Adam(Optimizer):
    def __init__(self, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params, lr: float, beta1: float = 0.9, beta2: float = 0.999) -> Optimizer:
    if name == "adam":
        return Adam(params, lr=lr, beta1=beta1, beta2=beta2)
    if name == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r} (expected 'adam' or 'sgd')")


def cosine_lr(peak: float, step: int, total: int, warmup: int = 0) -> float:
    """Linear warmup followed by cosine decay to zero."""
    if warmup and step < warmup:
        return peak * (step + 1) / warmup
    span = max(1, total - warmup)
    frac = min(1.0, (step - warmup) / span)
    return 0.5 * peak * (1.0 + math.cos(math.pi * frac))
