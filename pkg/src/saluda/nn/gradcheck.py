from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: str
    checked: int

    def passed(self, tolerance):
        return self.max_rel_error < tolerance


def grad_check(computation, inputs, h=1e-6, floor=1e-7, max_entries=None, seed=0):
    """Compare reverse-mode gradients with central differences.

    ``computation`` maps nothing to a scalar ``Tensor`` built from ``inputs``
    (name -> Tensor with ``requires_grad``); it is re-invoked for every
    perturbation so it must be deterministic. The relative error of an entry
    is ``|a - n| / max(|a|, |n|)``. Entries where both magnitudes are below
    ``floor`` count as agreeing: central differences cannot resolve them
    (their round-off is about ``eps * |f| / h``, roughly 1e-10 here).
    ``max_entries`` caps the number of probed entries per input (sampled).
    """
    for t in inputs.values():
        t.grad = None
    out = computation()
    out.backward()
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in inputs.items()}
    rng = np.random.default_rng(seed)
    worst_rel, worst_abs, worst = 0.0, 0.0, ""
    checked = 0
    for name, t in inputs.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = computation().item()
            flat[i] = orig - h
            fm = computation().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            a = a_flat[i]
            diff = abs(a - num)
            scale = max(abs(a), abs(num))
            rel = diff / scale if scale >= floor else 0.0
            checked += 1
            if diff > worst_abs:
                worst_abs = diff
            if rel > worst_rel:
                worst_rel, worst = rel, f"{name}[{i}]"
    return GradCheckReport(worst_rel, worst_abs, worst, checked)
