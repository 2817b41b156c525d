"""SGD and AdamW over a ParameterStore, with warmup + cosine learning rate."""

from __future__ import annotations

import math

import numpy as np

from .nn import ParameterStore


def no_decay(name: str) -> bool:
    """Biases, norms, class token and position embedding are not weight-decayed."""
    return name.endswith(".bias") or ".norm" in name or name.startswith("norm.") or name in ("cls_token", "pos_embed")


def cosine_lr(step: int, total: int, base_lr: float, warmup_fraction: float = 0.0, min_lr: float = 0.0) -> float:
    """Linear warmup for ``warmup_fraction * total`` steps, then cosine down to ``min_lr``.

    ``step`` is 1-based.
    """
    warmup = int(round(warmup_fraction * total))
    if warmup and step <= warmup:
        return base_lr * step / warmup
    span = max(1, total - warmup)
    progress = min(1.0, (step - warmup) / span)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * progress))


class SGD:
    def __init__(self, params: ParameterStore, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            g = self.params.grads[name]
            if self.weight_decay and not no_decay(name):
                g = g + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= lr * v


class AdamW:
    def __init__(self, params: ParameterStore, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.05):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = self.params.grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and not no_decay(name):
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, params: ParameterStore, lr: float, weight_decay: float):
    if kind == "adamw":
        return AdamW(params, lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'sgd' or 'adamw')")
