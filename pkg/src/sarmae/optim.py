"""AdamW with decoupled weight decay and a warmup-then-cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int, min_lr: float = 0.0) -> float:
    """Learning rate for 1-based ``step``.

    Linear ramp ``base * step / warmup`` for the first ``warmup_steps``
    steps, then half-cosine decay from ``base`` to ``min_lr`` at ``total_steps``.
    """
    if warmup_steps > 0 and step <= warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0), span) / span
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def default_decay(name: str, t: Tensor) -> bool:
    # matrices decay; biases, norm gains and tokens do not
    return t.ndim >= 2


class AdamW:
    def __init__(
        self,
        params: list[tuple[str, Tensor]],
        betas: tuple[float, float] = (0.9, 0.95),
        eps: float = 1e-8,
        weight_decay: float = 0.05,
        decay_filter=default_decay,
    ):
        self.params = [(n, t) for n, t in params if t.requires_grad]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decays = {n: decay_filter(n, t) for n, t in self.params}
        self.m = {n: np.zeros_like(t.data) for n, t in self.params}
        self.v = {n: np.zeros_like(t.data) for n, t in self.params}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.decays[name] and self.weight_decay:
                p.data *= p.data.dtype.type(1.0 - lr * self.weight_decay)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
