"""AdamW with decoupled weight decay and a warm-up + cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteGradient


@dataclass(frozen=True)
class WarmupCosine:
    """Linear warm-up from ``start_lr`` to ``base_lr``, then cosine decay to ``min_lr``."""

    base_lr: float
    warmup_steps: int
    total_steps: int
    start_lr: float = 1e-6
    min_lr: float = 0.0

    def __call__(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.start_lr + (self.base_lr - self.start_lr) * step / self.warmup_steps
        span = max(1, self.total_steps - self.warmup_steps)
        progress = min(1.0, (step - self.warmup_steps) / span)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam moments with weight decay applied directly to the parameters.

    ``groups`` maps a group name to the :class:`~ragcap.fusion.Param` objects it
    owns. Only those parameters are ever written; weight decay is scaled by the
    current learning rate, so a zero learning rate leaves them bit-identical.
    """

    def __init__(self, groups: dict, schedule, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.05):
        self.groups = {g: list(ps) for g, ps in groups.items()}
        self.params = {p.name: p for ps in self.groups.values() for p in ps}
        self.schedule = schedule
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {n: np.zeros_like(p.value) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.value) for n, p in self.params.items()}

    @property
    def lr(self) -> float:
        return self.schedule(self.step_count)

    def step(self, grads: dict) -> float:
        """Apply one update from ``grads`` (keyed by parameter name); returns the LR used."""
        missing = set(self.params) - set(grads)
        extra = set(grads) - set(self.params)
        if missing or extra:
            raise KeyError(f"gradient keys mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for group, ps in self.groups.items():
            for p in ps:
                if not np.all(np.isfinite(grads[p.name])):
                    raise NonFiniteGradient(group)
        lr = self.lr
        t = self.step_count + 1
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + self.eps)
            p.assign(p.value * (1.0 - lr * self.weight_decay) - lr * update)
        self.step_count = t
        return lr
