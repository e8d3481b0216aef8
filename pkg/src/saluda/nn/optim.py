from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericalError


def cosine_lr(base_lr, step, total):
    """Cosine annealing from ``base_lr`` at step 0 to 0 at ``total``."""
    if total <= 0:
        return base_lr
    t = min(max(step, 0), total)
    if t == total:
        return 0.0
    return base_lr * (1.0 + math.cos(math.pi * t / total)) / 2.0


@dataclass
class LrSchedule:
    base_lr: float
    total_iterations: int

    def __call__(self, step):
        return cosine_lr(self.base_lr, step, self.total_iterations)


@dataclass
class AdamW:
    """Adam with decoupled weight decay (Loshchilov & Hutter defaults)."""

    lr: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads, lr=None):
        """Update ``params`` (name -> array) in place from ``grads`` (name -> array or None).

        Missing gradients count as zero. A non-finite gradient aborts before
        anything is modified.
        """
        lr = self.lr if lr is None else lr
        for name, g in grads.items():
            if g is not None and not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient for {name}; step aborted")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p)
                v = np.zeros_like(p)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return params


def ema_update(teacher, student, decay):
    """teacher <- decay * teacher + (1 - decay) * student, in place, per array."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1], got {decay}")
    for name, t in teacher.items():
        s = student[name]
        if s.shape != t.shape:
            raise ValueError(f"EMA shape mismatch for {name}: {t.shape} vs {s.shape}")
        if decay == 1.0:
            continue
        if decay == 0.0:
            t[...] = s
        else:
            t *= decay
            t += (1.0 - decay) * s
    return teacher
