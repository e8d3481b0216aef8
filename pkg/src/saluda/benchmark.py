"""The synthetic 32-beam -> 64-beam adaptation benchmark.

``run_benchmark`` trains every model the headline comparisons need and
returns per-seed target mIoU for each method:

* source-only, Mixed BN (= SALUDA at lambda 0) and Mixed BN with frozen BN;
* an Entropy-validated lambda sweep over ``grid`` on the sweep seeds, then
  the chosen lambda retrained on ``final_seed``;
* Step-2 self-training started from each chosen-lambda model.

Models for the sweep seeds are reused as the chosen-lambda models for those
seeds, so the three evaluation seeds are ``sweep_seeds + (final_seed,)``.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import make_frames, simulate_split, sub_seed
from .lidar_sim import source_lidar, target_lidar
from .metrics import evaluate
from .model import ModelConfig, Network
from .training import SelfTrainConfig, TrainConfig, self_train_step2, train_source_only, train_step1
from .validators import DEFAULT_GRID, entropy_validator


def _default_train():
    return TrainConfig(base_lr=5e-3, total_iterations=1600, anchors_per_frame=128)


def _default_selftrain():
    return SelfTrainConfig()


@dataclass
class BenchmarkSpec:
    data_seed: int = 0
    source_frames: int = 40
    target_frames: int = 40
    target_val_frames: int = 20
    source_val_frames: int = 10
    azimuth_steps: int = 90
    noise_sigma: float = 0.02
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=_default_train)
    selftrain: SelfTrainConfig = field(default_factory=_default_selftrain)
    grid: tuple = DEFAULT_GRID
    sweep_seeds: tuple = (0, 1)
    final_seed: int = 2

    @property
    def seeds(self):
        return tuple(self.sweep_seeds) + (self.final_seed,)


@dataclass
class Splits:
    source: list
    target: list  # labels stripped
    target_val: list
    source_val: list


def build_splits(spec: BenchmarkSpec) -> Splits:
    """Same scenes and scans as ``saluda simulate`` with ``seed = spec.data_seed``."""
    def split(name, n, make, domain):
        lidar = make(azimuth_steps=spec.azimuth_steps, noise_sigma=spec.noise_sigma)
        return make_frames(simulate_split(n, lidar, sub_seed(spec.data_seed, f"simulate/{name}"), domain, name))

    target = split("target", spec.target_frames, target_lidar, "target")
    return Splits(
        source=split("source", spec.source_frames, source_lidar, "source"),
        target=[f.unlabeled() for f in target],
        target_val=split("target_val", spec.target_val_frames, target_lidar, "target"),
        source_val=split("source_val", spec.source_val_frames, source_lidar, "source"),
    )


def train_model(splits: Splits, spec: BenchmarkSpec, seed, mode="saluda", lam=0.0, **overrides):
    net = Network(spec.model, seed=seed)
    cfg = replace(spec.train, mode=mode, lam=lam, seed=seed, **overrides)
    if mode == "source_only":
        train_source_only(splits.source, cfg, net)
    else:
        train_step1(splits.source, splits.target, cfg, net)
    return net


def target_miou(net, splits: Splits):
    return evaluate(net, splits.target_val).miou()


@dataclass
class BenchmarkResult:
    seeds: tuple
    source_only: dict = field(default_factory=dict)
    mixed_bn: dict = field(default_factory=dict)
    frozen_bn_identical: bool | None = None
    sweep: dict = field(default_factory=dict)  # (lam, seed) -> {"entropy": .., "miou": ..}
    entropy_lam: float | None = None
    oracle_lam: float | None = None
    saluda: dict = field(default_factory=dict)
    selftrain: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def mean_sweep(self, key):
        lams = sorted({lam for lam, _ in self.sweep})
        return {lam: float(np.mean([v[key] for (l2, _), v in self.sweep.items() if l2 == lam])) for lam in lams}

    def summary(self):
        lines = [f"seeds {list(self.seeds)}"]
        for name in ("source_only", "mixed_bn", "saluda", "selftrain"):
            vals = getattr(self, name)
            if vals:
                per = " ".join(f"{100 * vals[s]:.1f}" for s in self.seeds if s in vals)
                lines.append(f"{name:12s} {per}  mean {100 * np.mean(list(vals.values())):.2f}")
        if self.sweep:
            ent, miou = self.mean_sweep("entropy"), self.mean_sweep("miou")
            for lam in ent:
                lines.append(f"  lambda {lam:<8g} entropy {ent[lam]:+.4f}  target mIoU {100 * miou[lam]:.2f}")
            lines.append(f"entropy-chosen lambda {self.entropy_lam:g}, oracle-chosen lambda {self.oracle_lam:g}")
        if self.frozen_bn_identical is not None:
            lines.append(f"frozen-BN Mixed BN identical to source-only: {self.frozen_bn_identical}")
        lines.append("timings " + ", ".join(f"{k} {v:.0f}s" for k, v in self.timings.items()))
        return "\n".join(lines)


def _argmax_smallest(scores):
    best = max(scores.values())
    return min(lam for lam, v in scores.items() if v == best)


def run_benchmark(spec: BenchmarkSpec | None = None, splits: Splits | None = None, log=print,
                  selftrain=True) -> BenchmarkResult:
    spec = spec or BenchmarkSpec()
    res = BenchmarkResult(spec.seeds)
    t0 = time.time()
    if splits is None:
        splits = build_splits(spec)
    res.timings["data"] = time.time() - t0

    t = time.time()
    nets = {}
    for seed in spec.sweep_seeds:
        for lam in spec.grid:
            net = train_model(splits, spec, seed, "saluda", lam)
            res.sweep[(lam, seed)] = {"entropy": entropy_validator(net, splits.target).value,
                                      "miou": target_miou(net, splits)}
            nets[(lam, seed)] = net
            log(f"sweep lambda={lam:g} seed={seed}: entropy {res.sweep[(lam, seed)]['entropy']:+.4f} "
                f"target mIoU {100 * res.sweep[(lam, seed)]['miou']:.1f}")
    # selection sees the entropy column only; the mIoU column is the oracle
    res.entropy_lam = _argmax_smallest(res.mean_sweep("entropy"))
    res.oracle_lam = _argmax_smallest(res.mean_sweep("miou"))
    res.timings["sweep"] = time.time() - t

    t = time.time()
    chosen = {seed: nets[(res.entropy_lam, seed)] for seed in spec.sweep_seeds}
    chosen[spec.final_seed] = train_model(splits, spec, spec.final_seed, "saluda", res.entropy_lam)
    res.saluda = {seed: target_miou(net, splits) for seed, net in chosen.items()}
    res.timings["retrain"] = time.time() - t

    t = time.time()
    for seed in spec.seeds:
        res.source_only[seed] = target_miou(train_model(splits, spec, seed, "source_only"), splits)
        if 0.0 in spec.grid and (0.0, seed) in nets:
            # SALUDA at lambda 0 runs the Mixed BN code path exactly
            res.mixed_bn[seed] = res.sweep[(0.0, seed)]["miou"]
        else:
            res.mixed_bn[seed] = target_miou(train_model(splits, spec, seed, "mixed_bn"), splits)
        log(f"seed {seed}: source-only {100 * res.source_only[seed]:.1f} Mixed BN {100 * res.mixed_bn[seed]:.1f}")
    seed = spec.seeds[0]
    frozen = train_model(splits, spec, seed, "mixed_bn", target_bn_update=False)
    plain = train_model(splits, spec, seed, "source_only")
    res.frozen_bn_identical = frozen.state_dict().keys() == plain.state_dict().keys() and all(
        a.tobytes() == plain.state_dict()[k].tobytes() for k, a in frozen.state_dict().items())
    res.timings["baselines"] = time.time() - t

    if selftrain:
        t = time.time()
        for seed, net in chosen.items():
            student = self_train_step2(net, splits.source, splits.target, replace(spec.selftrain, seed=seed)).net
            res.selftrain[seed] = target_miou(student, splits)
            log(f"seed {seed}: Step 1 {100 * res.saluda[seed]:.1f} -> Step 2 {100 * res.selftrain[seed]:.1f}")
        res.timings["selftrain"] = time.time() - t
    res.timings["total"] = time.time() - t0
    return res
