"""Label-free model selection and the grid-search-then-retrain protocol."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .metrics import evaluate
from .model import predict
from .nn import BNMode

KINDS = ("entropy", "im", "src_val")
DEFAULT_GRID = (0.0, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


class ValidatorError(ValueError):
    pass


class LabelLeakError(ValidatorError):
    """A label-free validator was handed a split that still carries labels."""


@dataclass
class ValidatorScore:
    kind: str
    value: float
    model_id: str = ""
    lam: float | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidatorError(f"unknown validator kind {self.kind!r}")
        if not math.isfinite(self.value):
            raise ValidatorError(f"non-finite {self.kind} score")


def _entropy_rows(p):
    return -np.sum(p * np.log(np.clip(p, 1e-300, None)), axis=1)


def _target_probs(net, frames):
    """Class probabilities of every raw point of unlabeled ``frames``."""
    if not frames:
        raise ValidatorError("empty validation split")
    out = []
    for f in frames:
        if f.raw.labels is not None or f.rep.labels is not None:
            raise LabelLeakError(f"frame {f.frame_id!r} carries labels; pass frame.unlabeled()")
        probs = predict(net, f.graph(net.config), BNMode.EVAL_FROZEN)
        out.append(probs[f.mapping])
    return np.concatenate(out)


def entropy_score(probs):
    """Negated mean Shannon entropy of the rows of ``probs``."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) == 0:
        raise ValidatorError("empty validation split")
    return float(-_entropy_rows(probs).mean())


def im_score(probs):
    """Entropy of the mean prediction minus the mean per-point entropy."""
    probs = np.asarray(probs, dtype=np.float64)
    if len(probs) == 0:
        raise ValidatorError("empty validation split")
    diversity = _entropy_rows(probs.mean(axis=0, keepdims=True))[0]
    return float(diversity - _entropy_rows(probs).mean())


def entropy_validator(net, target_val, model_id="", lam=None, seed=None):
    return ValidatorScore("entropy", entropy_score(_target_probs(net, target_val)), model_id, lam, seed)


def im_validator(net, target_val, model_id="", lam=None, seed=None):
    return ValidatorScore("im", im_score(_target_probs(net, target_val)), model_id, lam, seed)


def src_val_validator(net, source_val, model_id="", lam=None, seed=None):
    if not source_val:
        raise ValidatorError("empty validation split")
    return ValidatorScore("src_val", evaluate(net, source_val).miou(), model_id, lam, seed)


VALIDATORS = {"entropy": entropy_validator, "im": im_validator, "src_val": src_val_validator}


class SweepError(RuntimeError):
    def __init__(self, message, rows):
        super().__init__(message)
        self.rows = rows


@dataclass
class SweepResult:
    chosen_lam: float
    net: object
    final_seed: int
    rows: list = field(default_factory=list)
    mean_scores: dict = field(default_factory=dict)
    models: dict = field(default_factory=dict)


def select_hyperparameter(grid, trainer, validator, seeds_per_lam=2, seeds=None, final_seed=None,
                          keep_models=False):
    """Grid search with ``seeds_per_lam`` models per value, then one retrain.

    ``trainer(lam, seed)`` returns a trained net and ``validator(net)`` a
    score (a ``ValidatorScore`` or a float, higher is better). Scores are
    averaged per value; ties go to the smaller value. The chosen value is
    retrained with ``final_seed`` (by default the first seed not used in the
    sweep).
    """
    grid = [float(v) for v in grid]
    if not grid:
        raise ValidatorError("empty hyperparameter grid")
    seeds = list(range(seeds_per_lam)) if seeds is None else list(seeds)
    if final_seed is None:
        final_seed = max(seeds) + 1
    if final_seed in seeds:
        raise ValidatorError("the final model needs a seed not used in the sweep")
    rows, means, models = [], {}, {}
    for lam in grid:
        values = []
        for seed in seeds:
            try:
                net = trainer(lam, seed)
                score = validator(net)
            except Exception as exc:
                raise SweepError(f"sweep failed at lambda={lam} seed={seed}: {exc}", rows) from exc
            value = score.value if isinstance(score, ValidatorScore) else float(score)
            values.append(value)
            rows.append({"lambda": lam, "seed": seed, "score": value})
            if keep_models:
                models[(lam, seed)] = net
        means[lam] = float(np.mean(values))
    best = max(means.values())
    chosen = min(lam for lam, m in means.items() if m == best)
    try:
        net = trainer(chosen, final_seed)
    except Exception as exc:
        raise SweepError(f"final retrain failed at lambda={chosen}: {exc}", rows) from exc
    return SweepResult(chosen, net, final_seed, rows, means, models)


def write_sweep_csv(rows, path):
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
