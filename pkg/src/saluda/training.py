"""Step-1 joint training, baselines, batch-norm adaptation and Step-2 self-training.

Iteration ``i`` (1-based) of every alternating loop is a source iteration
when ``i`` is odd and a target iteration when it is even. The learning rate
follows a cosine schedule over the whole loop. Target iterations whose loss
carries zero weight only run the forward pass (which refreshes batch-norm
running statistics) and take no optimizer step.
"""
from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import Frame, named_rng
from .geometry import IGNORE_ID
from .model import EmptySupportError, Network, stack_frames
from .nn import BNMode, NumericalError, Tensor
from .queries import sample_visibility_queries

log = logging.getLogger(__name__)

MODES = ("source_only", "saluda", "mixed_bn", "min_ent")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lam: float = 1e-5
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    total_iterations: int = 400
    batch_size: int = 1
    delta: float = 0.1
    ball_radius: float = 1.0
    anchors_per_frame: int = 2048
    mode: str = "saluda"
    min_ent_weight: float = 0.0
    seed: int = 0
    target_bn_update: bool = True
    augment: bool = True
    checkpoint_every: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}; expected one of {MODES}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.min_ent_weight < 0:
            raise ConfigError("min_ent_weight must be >= 0")
        if self.total_iterations < 1 or self.batch_size < 1 or self.anchors_per_frame < 1:
            raise ConfigError("iterations, batch size and anchor budget must be positive")
        if self.delta <= 0 or self.ball_radius <= 0:
            raise ConfigError("delta and ball_radius must be positive")


@dataclass
class SelfTrainConfig:
    epochs: int = 3
    ema_decay: float = 0.999
    confidence_threshold: float = 0.9
    seed: int = 0
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 1
    augment: bool = True

    def validate(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ConfigError("confidence_threshold must lie in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")


@dataclass
class BnAdaptConfig:
    method: str = "adabn"
    omega: float = 0.89
    zeta: float = 0.0
    initial_momentum: float = 0.1
    batches: int = 0  # 0 = one full pass over the target frames
    batch_size: int = 1

    def validate(self):
        if self.method not in ("adabn", "dua"):
            raise ConfigError(f"unknown BN adaptation method {self.method!r}")
        if not 0.0 < self.omega <= 1.0:
            raise ConfigError("omega must lie in (0, 1]")
        if self.zeta < 0:
            raise ConfigError("zeta must be >= 0")


@dataclass
class TrainResult:
    net: Network
    trace: list = field(default_factory=list)
    skipped_occ: int = 0
    skipped_targets: int = 0
    teacher: Network | None = None


class BatchStream:
    """Endless epoch-wise shuffled batches."""

    def __init__(self, frames, batch_size, rng):
        self.frames = list(frames)
        self.batch_size = batch_size
        self.rng = rng
        self._queue = []

    def __bool__(self):
        return bool(self.frames)

    def next(self):
        out = []
        while len(out) < min(self.batch_size, len(self.frames)):
            if not self._queue:
                self._queue = list(self.rng.permutation(len(self.frames)))
            out.append(self.frames[self._queue.pop(0)])
        return out


def random_rotation(rng):
    """Random rotation about z composed with random x/y flips."""
    a = rng.uniform(-math.pi, math.pi)
    fx, fy = rng.choice([-1.0, 1.0], size=2)
    c, s = math.cos(a), math.sin(a)
    return np.diag([fx, fy, 1.0]) @ np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _batch(frames, net, rotations=None):
    return stack_frames([f.graph(net.config) for f in frames], rotations)


def _rotations(frames, rng, enabled):
    if not enabled:
        return [None] * len(frames)
    return [random_rotation(rng) for _ in frames]


def _labels(frames):
    return np.concatenate([f.rep.labels for f in frames])


def occupancy_loss(net, latents, frames, bounds, cfg: TrainConfig, query_rng, rotations, tensors):
    """Mean BCE over all supported visibility queries of the batch.

    ``rotations[k]`` is the augmentation applied to frame ``k``'s backbone
    input; the same rotation is applied to the offsets ``p - q``.
    """
    logits, targets = [], []
    for k, f in enumerate(frames):
        q = sample_visibility_queries(f.rep, cfg.delta, int(query_rng.integers(2**63)), cfg.anchors_per_frame)
        rot = rotations[k]
        if len(q) == 0:
            continue
        z = latents if len(frames) == 1 else nn.gather_rows(latents, np.arange(bounds[k], bounds[k + 1]))
        index = f.graph(net.config).surf_index if cfg.ball_radius == net.config.surf_radius else None
        try:
            lo, mask = net.surf_logits(z, f.rep.positions, q, index, tensors, rotation=rot, radius=cfg.ball_radius)
        except EmptySupportError:
            continue
        logits.append(lo)
        targets.append(q.labels[mask])
    if not logits:
        raise EmptySupportError("no supported occupancy query in this batch")
    lo = logits[0] if len(logits) == 1 else nn.concat(logits, axis=0)
    return nn.sigmoid_bce(lo, np.concatenate(targets))


def _step(net, opt, loss, tensors, lr, what):
    nn.check_finite(loss, what)
    loss.backward()
    grads = {k: t.grad for k, t in tensors.items()}
    opt.step(net.params, grads, lr)


def _write_trace_row(trace, i, domain, l_sem, l_occ, lr):
    trace.append({"iteration": i, "domain": domain, "l_sem": l_sem, "l_occ": l_occ, "lr": lr})


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["iteration", "domain", "l_sem", "l_occ", "lr"])
        w.writeheader()
        for row in trace:
            w.writerow({k: ("" if v is None else (repr(v) if isinstance(v, float) else v)) for k, v in row.items()})


def train_step1(source, target, cfg: TrainConfig, net: Network, checkpoint_dir=None):
    """Alternating source/target training in any Step-1 mode.

    Source iterations minimise ``CE + lambda * BCE_occ`` (the occupancy term
    only in ``saluda`` mode), target iterations ``lambda * BCE_occ``
    (``saluda``) or ``min_ent_weight * entropy`` (``min_ent``). Target labels
    are never read. ``net`` is updated in place and returned in the result.
    """
    cfg.validate()
    if not source:
        raise ConfigError("training needs at least one source frame")
    use_target = cfg.mode != "source_only" and bool(target)
    lam = cfg.lam if cfg.mode == "saluda" else 0.0
    ent_w = cfg.min_ent_weight if cfg.mode == "min_ent" else 0.0
    opt = nn.AdamW(cfg.base_lr, cfg.weight_decay)
    src = BatchStream(source, cfg.batch_size, named_rng(cfg.seed, "train/source_order"))
    tgt = BatchStream(target or [], cfg.batch_size, named_rng(cfg.seed, "train/target_order"))
    query_rng = named_rng(cfg.seed, "train/queries")
    src_aug = named_rng(cfg.seed, "train/source_augment")
    tgt_aug = named_rng(cfg.seed, "train/target_augment")
    result = TrainResult(net)
    total = cfg.total_iterations
    for i in range(1, total + 1):
        lr = nn.cosine_lr(cfg.base_lr, i - 1, total)
        if i % 2 == 1:
            frames = src.next()
            rots = _rotations(frames, src_aug, cfg.augment)
            graph, bounds = _batch(frames, net, rots)
            t = net.tensors()
            z = net.backbone(graph, BNMode.TRAIN_UPDATE, t)
            l_sem = nn.softmax_cross_entropy(net.cls_logits(z, t), _labels(frames), IGNORE_ID)
            loss, l_occ = l_sem, None
            if lam > 0:
                try:
                    occ = occupancy_loss(net, z, frames, bounds, cfg, query_rng, rots, t)
                    loss = l_sem + nn.scale(occ, lam)
                    l_occ = occ.item()
                except EmptySupportError:
                    result.skipped_occ += 1
            _step(net, opt, loss, t, lr, f"source loss at iteration {i}")
            _write_trace_row(result.trace, i, "source", l_sem.item(), l_occ, lr)
        elif use_target:
            frames = tgt.next()
            rots = _rotations(frames, tgt_aug, cfg.augment)
            graph, bounds = _batch(frames, net, rots)
            bn_mode = BNMode.TRAIN_UPDATE if cfg.target_bn_update else BNMode.EVAL_FROZEN
            if lam > 0:
                t = net.tensors()
                z = net.backbone(graph, bn_mode, t)
                try:
                    occ = occupancy_loss(net, z, frames, bounds, cfg, query_rng, rots, t)
                except EmptySupportError:
                    result.skipped_occ += 1
                    _write_trace_row(result.trace, i, "target", None, None, lr)
                    continue
                _step(net, opt, nn.scale(occ, lam), t, lr, f"target loss at iteration {i}")
                _write_trace_row(result.trace, i, "target", None, occ.item(), lr)
            elif ent_w > 0:
                t = net.tensors()
                z = net.backbone(graph, bn_mode, t)
                ent = nn.mean_entropy(net.cls_logits(z, t))
                _step(net, opt, nn.scale(ent, ent_w), t, lr, f"entropy loss at iteration {i}")
                _write_trace_row(result.trace, i, "target", None, None, lr)
            else:
                if cfg.target_bn_update:
                    net.backbone(graph, BNMode.TRAIN_UPDATE)
                _write_trace_row(result.trace, i, "target", None, None, lr)
        if checkpoint_dir and cfg.checkpoint_every and i % cfg.checkpoint_every == 0:
            nn.checkpoint.save(os.path.join(checkpoint_dir, f"step1_{i:07d}.salw"), net.state_dict())
    return result


def train_source_only(source, cfg: TrainConfig, net: Network, checkpoint_dir=None):
    cfg = _with_mode(cfg, "source_only")
    return train_step1(source, None, cfg, net, checkpoint_dir)


def train_mixed_bn(source, target, cfg: TrainConfig, net: Network, checkpoint_dir=None):
    return train_step1(source, target, _with_mode(cfg, "mixed_bn"), net, checkpoint_dir)


def train_min_ent(source, target, cfg: TrainConfig, net: Network, checkpoint_dir=None):
    return train_step1(source, target, _with_mode(cfg, "min_ent"), net, checkpoint_dir)


def _with_mode(cfg, mode):
    from dataclasses import replace

    return replace(cfg, mode=mode)


# ------------------------------------------------------------ BN adaptation


def adapt_bn(net: Network, target, cfg: BnAdaptConfig):
    """Re-estimate batch-norm running statistics on target frames.

    ``adabn`` resets the statistics and takes a cumulative average over one
    pass (momentum 1/k at the k-th batch). ``dua`` keeps the current
    statistics and streams target batches with momentum
    ``max(initial_momentum * omega**k, zeta)``. Parameters never change.
    """
    cfg.validate()
    if not target:
        log.warning("adapt_bn: empty target stream, statistics left unchanged")
        return net
    bs = max(1, cfg.batch_size)
    batches = [target[k:k + bs] for k in range(0, len(target), bs)]
    if cfg.batches:
        batches = [batches[k % len(batches)] for k in range(cfg.batches)]
    if cfg.method == "adabn":
        for s in net.bn.values():
            s.reset()
    for k, frames in enumerate(batches):
        graph, _ = _batch(frames, net)
        if cfg.method == "adabn":
            m = 1.0 / (k + 1)
        else:
            m = max(cfg.initial_momentum * cfg.omega ** k, cfg.zeta)
        if m <= 0:
            break
        net.backbone(graph, BNMode.TRAIN_UPDATE, bn_momentum=m)
    return net


# ------------------------------------------------------------ self-training


def teacher_pseudo_labels(teacher: Network, graph, threshold):
    probs = nn.softmax(teacher.cls_logits(teacher.backbone(graph, BNMode.EVAL_FROZEN)).data)
    labels = probs.argmax(axis=1)
    labels[probs.max(axis=1) < threshold] = IGNORE_ID
    return labels


def self_train_step2(net_init: Network, source, target, cfg: SelfTrainConfig, pseudo_labeler=None):
    """Mean-teacher self-training; returns the student (teacher kept on the result).

    One epoch is one pass over the target frames, interleaved 1:1 with
    source batches. ``pseudo_labeler(frames, graph)`` replaces the teacher
    when given (used to inject oracle labels).
    """
    cfg.validate()
    if not source or not target:
        raise ConfigError("self-training needs source and target frames")
    student = net_init.copy()
    teacher = net_init.copy()
    opt = nn.AdamW(cfg.base_lr, cfg.weight_decay)
    src = BatchStream(source, cfg.batch_size, named_rng(cfg.seed, "selftrain/source_order"))
    tgt = BatchStream(target, cfg.batch_size, named_rng(cfg.seed, "selftrain/target_order"))
    src_aug = named_rng(cfg.seed, "selftrain/source_augment")
    tgt_aug = named_rng(cfg.seed, "selftrain/target_augment")
    per_epoch = math.ceil(len(target) / cfg.batch_size)
    total = 2 * cfg.epochs * per_epoch
    result = TrainResult(student, teacher=teacher)
    for i in range(1, total + 1):
        lr = nn.cosine_lr(cfg.base_lr, i - 1, total)
        if i % 2 == 1:
            frames = src.next()
            graph, _ = _batch(frames, student, _rotations(frames, src_aug, cfg.augment))
            labels = _labels(frames)
            domain = "source"
        else:
            frames = tgt.next()
            plain, _ = _batch(frames, student)
            if pseudo_labeler is None:
                labels = teacher_pseudo_labels(teacher, plain, cfg.confidence_threshold)
            else:
                labels = np.asarray(pseudo_labeler(frames, plain))
            # the teacher sees the plain frame, the student an augmented view
            graph, _ = _batch(frames, student, _rotations(frames, tgt_aug, cfg.augment))
            domain = "target"
            if not np.any(labels != IGNORE_ID):
                result.skipped_targets += 1
                _write_trace_row(result.trace, i, domain, None, None, lr)
                continue
        t = student.tensors()
        z = student.backbone(graph, BNMode.TRAIN_UPDATE, t)
        loss = nn.softmax_cross_entropy(student.cls_logits(z, t), labels, IGNORE_ID)
        _step(student, opt, loss, t, lr, f"self-training loss at iteration {i}")
        nn.ema_update(teacher.ema_arrays(), student.ema_arrays(), cfg.ema_decay)
        _write_trace_row(result.trace, i, domain, loss.item(), None, lr)
    return result


__all__ = [
    "BnAdaptConfig", "ConfigError", "NumericalError", "SelfTrainConfig", "TrainConfig", "TrainResult",
    "adapt_bn", "self_train_step2", "train_min_ent", "train_mixed_bn", "train_source_only", "train_step1",
    "write_trace_csv", "Frame", "Tensor",
]
