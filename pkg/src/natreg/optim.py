"""Adam with the inverse-square-root warmup schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import Tensor


def noam_lr(step: int, base_lr: float, warmup_steps: int, d_model: int) -> float:
    """``base_lr * min(step^-0.5, step * warmup^-1.5) * d_model^-0.5`` for ``step >= 1``."""
    if step < 1:
        raise ValueError("schedule is defined for step >= 1")
    return base_lr * min(step**-0.5, step * warmup_steps**-1.5) * d_model**-0.5


class Adam:
    def __init__(
        self,
        params: Sequence[Tensor],
        base_lr: float = 1.0,
        warmup_steps: int = 4000,
        d_model: int = 512,
        betas: tuple[float, float] = (0.9, 0.98),
        eps: float = 1e-9,
    ):
        if warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        # shared tables must be stepped once
        seen: set[int] = set()
        self.params = [p for p in params if not (id(p) in seen or seen.add(id(p)))]
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.d_model = d_model
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def lr(self, step: int | None = None) -> float:
        return noam_lr(step or max(self.step_count, 1), self.base_lr, self.warmup_steps, self.d_model)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        self.step_count += 1
        t = self.step_count
        lr = self.lr(t)
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        return lr

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
