"""Shared point backbone with a segmentation head and an occupancy head.

The backbone stacks neighbourhood-aggregation blocks
``relu(BN(mean_{ball(r)}(h W + b)))`` over per-point input features and ends in a linear map to the latent
width. The default input is the height above the sensor, the log point count
in a 1 m ball and a constant 1. ``range`` adds the horizontal distance to the
sensor, ``offset`` uses the full sensor offset instead of the height (it is
the only set that augmentation rotations change).

The occupancy head follows the ball-pooling design: rows ``[z_p, p - q]`` for every input point within
the ball around query ``q`` go through a row-wise MLP, get averaged with
softmax-normalised learned weights, then a linear map and a sigmoid.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import nn
from .geometry import PointCloud, ball_query_many, build_index
from .nn import BNMode, Tensor
from .queries import QuerySet


class EmptySupportError(ValueError):
    """No query had any input point inside its ball."""


@dataclass
class ModelConfig:
    num_classes: int = 6
    latent_dim: int = 32
    widths: tuple = (32, 32, 32)
    radii: tuple = (0.5, 1.0, 2.0)
    density_radius: float = 1.0
    features: str = "height"
    surf_hidden: int = 32
    surf_radius: float = 1.0
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.radii = tuple(float(r) for r in self.radii)
        if len(self.widths) != len(self.radii):
            raise ValueError("one radius per backbone block")
        if self.features not in FEATURE_WIDTH:
            raise ValueError(f"unknown feature set {self.features!r}; expected one of {sorted(FEATURE_WIDTH)}")


# offset: sensor offset (x, y, z), log count, 1
# range:  horizontal range, height above the sensor, log count, 1
# height: height above the sensor, log count, 1
FEATURE_WIDTH = {"offset": 5, "range": 4, "height": 3}


# ------------------------------------------------------------------ frames


def _mean_operator(offsets, indices, n):
    counts = np.diff(offsets)
    rows = np.repeat(np.arange(n), counts)
    vals = 1.0 / counts[rows]
    return sp.csr_matrix((vals, (rows, indices)), shape=(n, n))


@dataclass
class FrameGraph:
    """A cloud with its cached neighbourhood operators and input features.

    Rotations about z and x/y flips leave the operators unchanged and only
    rotate the offset columns of the features (see ``rotate_features``).
    """

    cloud: PointCloud
    features: np.ndarray
    aggregators: list
    surf_index: object = field(repr=False)
    kind: str = "offset"

    def __len__(self):
        return len(self.features)


def input_features(cloud: PointCloud, density_counts, kind="offset"):
    origin = np.zeros(3) if cloud.sensor_origin is None else cloud.sensor_origin
    rel = cloud.positions - origin
    tail = [np.log(density_counts)[:, None], np.ones((len(cloud), 1))]
    if kind == "offset":
        head = [rel]
    elif kind == "range":
        head = [np.hypot(rel[:, 0], rel[:, 1])[:, None], rel[:, 2:]]
    elif kind == "height":
        head = [rel[:, 2:]]
    else:
        raise ValueError(f"unknown feature set {kind!r}")
    return np.concatenate(head + tail, axis=1)


def rotate_features(features, rotation, kind="offset"):
    """Apply a 3x3 rotation (about z, possibly with x/y flips) to the offset columns.

    The ``range`` and ``height`` feature sets are invariant and pass through.
    """
    if rotation is None or kind != "offset":
        return features
    out = features.copy()
    out[:, :3] = features[:, :3] @ np.asarray(rotation).T
    return out


def prepare_frame(cloud: PointCloud, config: ModelConfig) -> FrameGraph:
    n = len(cloud)
    aggregators = []
    density = None
    for r in config.radii:
        if n == 0:
            aggregators.append(sp.csr_matrix((0, 0)))
            continue
        index = build_index(cloud.positions, r)
        offsets, idx = ball_query_many(index, cloud.positions, r)
        aggregators.append(_mean_operator(offsets, idx, n))
        if r == config.density_radius:
            density = np.diff(offsets)
    if density is None and n:
        offsets, _ = ball_query_many(build_index(cloud.positions, config.density_radius), cloud.positions,
                                     config.density_radius)
        density = np.diff(offsets)
    kind = config.features
    features = input_features(cloud, density, kind) if n else np.zeros((0, FEATURE_WIDTH[kind]))
    surf_index = build_index(cloud.positions, config.surf_radius)
    return FrameGraph(cloud, features, aggregators, surf_index, kind)


def stack_frames(frames, rotations=None):
    """Merge several prepared frames into one batch (block-diagonal operators)."""
    rotations = rotations or [None] * len(frames)
    if len(frames) == 1:
        f = frames[0]
        if rotations[0] is not None:
            f = FrameGraph(f.cloud, rotate_features(f.features, rotations[0], f.kind), f.aggregators, f.surf_index,
                           f.kind)
        return f, [0, len(f)]
    bounds = np.concatenate([[0], np.cumsum([len(f) for f in frames])])
    kind = frames[0].kind
    features = np.concatenate([rotate_features(f.features, r, kind) for f, r in zip(frames, rotations)])
    aggs = [sp.block_diag([f.aggregators[k] for f in frames], format="csr") for k in range(len(frames[0].aggregators))]
    return FrameGraph(None, features, aggs, None, kind), bounds.tolist()


# ------------------------------------------------------------------ network


class Network:
    """Parameters (name -> float64 array) plus batch-norm states (name -> BatchNormState)."""

    def __init__(self, config: ModelConfig | None = None, seed=0):
        self.config = config or ModelConfig()
        self.params = {}
        self.bn = {}
        rng = np.random.default_rng(seed)
        c = self.config
        fan_in = FEATURE_WIDTH[self.config.features]
        for k, w in enumerate(c.widths):
            self._init_linear(rng, f"backbone.{k}.mlp", fan_in, w)
            self.params[f"backbone.{k}.bn.weight"] = np.ones(w)
            self.params[f"backbone.{k}.bn.bias"] = np.zeros(w)
            self.bn[f"backbone.{k}.bn"] = nn.BatchNormState(w, c.bn_momentum, c.bn_eps)
            fan_in = w
        self._init_linear(rng, "backbone.out", fan_in, c.latent_dim)
        self._init_linear(rng, "cls", c.latent_dim, c.num_classes)
        self._init_linear(rng, "surf.mlp", c.latent_dim + 3, c.surf_hidden)
        self._init_linear(rng, "surf.value", c.surf_hidden, c.surf_hidden)
        self._init_linear(rng, "surf.score", c.surf_hidden, 1)
        self._init_linear(rng, "surf.out", c.surf_hidden, 1)

    def _init_linear(self, rng, name, fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        self.params[f"{name}.weight"] = rng.uniform(-bound, bound, (fan_in, fan_out))
        self.params[f"{name}.bias"] = rng.uniform(-bound, bound, fan_out)

    def copy(self):
        return copy.deepcopy(self)

    def tensors(self, requires_grad=True):
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    # state dict covers learnable parameters and running statistics
    def state_dict(self):
        out = {k: v.copy() for k, v in self.params.items()}
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean.copy()
            out[f"{k}.running_var"] = s.running_var.copy()
        return out

    def load_state_dict(self, state):
        expected = set(self.state_dict())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for k in self.params:
            if state[k].shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {self.params[k].shape}")
            self.params[k][...] = state[k]
        for k, s in self.bn.items():
            s.running_mean = np.array(state[f"{k}.running_mean"], dtype=np.float64)
            s.running_var = np.array(state[f"{k}.running_var"], dtype=np.float64)

    def ema_arrays(self):
        """Every array the EMA teacher tracks: parameters and BN running statistics."""
        out = dict(self.params)
        for k, s in self.bn.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def checksum(self):
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    # ---------------------------------------------------------------- forward

    def backbone(self, frame: FrameGraph, bn_mode=BNMode.TRAIN_UPDATE, tensors=None, bn_momentum=None):
        t = tensors if tensors is not None else self.tensors(requires_grad=False)
        h = Tensor(frame.features)
        for k, agg in enumerate(frame.aggregators):
            h = nn.linear(h, t[f"backbone.{k}.mlp.weight"], t[f"backbone.{k}.mlp.bias"])
            h = nn.sparse_matmul(agg, h)
            h = nn.batchnorm(h, t[f"backbone.{k}.bn.weight"], t[f"backbone.{k}.bn.bias"],
                             self.bn[f"backbone.{k}.bn"], bn_mode, momentum=bn_momentum)
            h = nn.relu(h)
        return nn.linear(h, t["backbone.out.weight"], t["backbone.out.bias"])

    def cls_logits(self, latents, tensors=None):
        t = tensors if tensors is not None else self.tensors(requires_grad=False)
        return nn.linear(latents, t["cls.weight"], t["cls.bias"])

    def surf_logits(self, latents, positions, queries: QuerySet, index=None, tensors=None, rotation=None,
                    radius=None):
        """Occupancy logits for the supported queries, plus the boolean support mask.

        ``rotation`` (3x3) is applied to the relative offsets ``p - q``; a
        rotation about z is how training augments the occupancy branch.
        """
        t = tensors if tensors is not None else self.tensors(requires_grad=False)
        radius = self.config.surf_radius if radius is None else radius
        if index is None or index.voxel_size != radius:
            index = build_index(positions, radius)
        offsets, idx = ball_query_many(index, queries.positions, radius)
        counts = np.diff(offsets)
        mask = counts > 0
        if not mask.any():
            raise EmptySupportError(f"none of {len(queries)} queries has a point within {radius} m")
        seg_full = np.repeat(np.arange(len(queries)), counts)
        compact = np.cumsum(mask) - 1
        seg = compact[seg_full]
        rel = positions[idx] - queries.positions[seg_full]
        if rotation is not None:
            rel = rel @ np.asarray(rotation).T
        rows = nn.concat([nn.gather_rows(latents, idx), Tensor(rel)], axis=1)
        hidden = nn.relu(nn.linear(rows, t["surf.mlp.weight"], t["surf.mlp.bias"]))
        values = nn.linear(hidden, t["surf.value.weight"], t["surf.value.bias"])
        scores = nn.linear(hidden, t["surf.score.weight"], t["surf.score.bias"])
        pooled = nn.segment_softmax_pool(values, scores, seg, int(mask.sum()))
        logits = nn.linear(pooled, t["surf.out.weight"], t["surf.out.bias"])
        return logits, mask


# ----------------------------------------------------------- functional API


def backbone_forward(cloud_or_frame, net: Network, bn_mode=BNMode.EVAL_FROZEN):
    """Per-point latents (N, d) as a plain array."""
    frame = cloud_or_frame if isinstance(cloud_or_frame, FrameGraph) else prepare_frame(cloud_or_frame, net.config)
    if len(frame) == 0:
        return np.zeros((0, net.config.latent_dim))
    return net.backbone(frame, bn_mode).data


def cls_forward(latents, net: Network):
    return nn.softmax(net.cls_logits(Tensor(latents)).data)


def surf_forward(latents, cloud: PointCloud, queries: QuerySet, net: Network, radius=None):
    """(occupancy probabilities for supported queries, support mask)."""
    logits, mask = net.surf_logits(Tensor(latents), cloud.positions, queries, radius=radius)
    return nn.sigmoid(logits).data[:, 0], mask


def predict(net: Network, frame, bn_mode=BNMode.EVAL_FROZEN):
    """Class probabilities for every point of a prepared frame (or cloud)."""
    frame = frame if isinstance(frame, FrameGraph) else prepare_frame(frame, net.config)
    if len(frame) == 0:
        return np.zeros((0, net.config.num_classes))
    z = net.backbone(frame, bn_mode)
    return nn.softmax(net.cls_logits(z).data)
