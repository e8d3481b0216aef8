from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import Tensor


class BNMode(str, Enum):
    TRAIN_UPDATE = "train_update"
    EVAL_FROZEN = "eval_frozen"


class DegenerateBatchError(ValueError):
    pass


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    Variance is the biased (population) batch variance, both for
    normalization and for the running estimate.
    """

    num_features: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_features)
        if self.running_var is None:
            self.running_var = np.ones(self.num_features)

    def reset(self):
        self.running_mean = np.zeros(self.num_features)
        self.running_var = np.ones(self.num_features)

    def copy(self):
        return BatchNormState(self.num_features, self.momentum, self.eps,
                              self.running_mean.copy(), self.running_var.copy())


def batchnorm(x, gamma, beta, state: BatchNormState, mode=BNMode.TRAIN_UPDATE, momentum=None):
    """Batch norm over rows of ``x`` (N, F).

    In TRAIN_UPDATE mode the batch statistics normalize the input and the
    running statistics move by ``run <- (1-m) run + m batch``; ``momentum``
    overrides the state's value for this call only (used by BN adaptation).
    EVAL_FROZEN normalizes with the running statistics and leaves them alone.
    """
    mode = BNMode(mode)
    n = x.shape[0]
    if mode is BNMode.TRAIN_UPDATE:
        if n < 2:
            raise DegenerateBatchError(f"batch norm needs at least 2 rows in train mode, got {n}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        m = state.momentum if momentum is None else momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
    else:
        mu = state.running_mean
        var = state.running_var
    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=0))
        if beta.requires_grad:
            beta._accum(g.sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            if mode is BNMode.TRAIN_UPDATE:
                gx = inv_std * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))
            else:
                gx = gx * inv_std
            x._accum(gx)

    return Tensor(out, _parents=(x, gamma, beta), _backward=backward)
