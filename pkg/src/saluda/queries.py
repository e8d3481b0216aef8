"""Line-of-sight occupancy queries with geometric pseudo-labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud

SIGHT, FRONT, BEHIND = 0, 1, 2
ROLE_NAMES = ("sight", "front", "behind")
DEFAULT_DELTA = 0.1


class MissingOriginError(ValueError):
    pass


@dataclass
class QuerySet:
    """Struct-of-arrays query batch; row ``k`` is one query point.

    ``labels`` is 1 for full (inside an object) and 0 for empty.
    """

    positions: np.ndarray
    labels: np.ndarray
    anchor_index: np.ndarray
    roles: np.ndarray
    delta: float
    frame_id: str = ""

    def __len__(self):
        return len(self.positions)


def subsample_anchors(cloud_or_n, count, rng_seed=0):
    n = cloud_or_n if isinstance(cloud_or_n, (int, np.integer)) else len(cloud_or_n)
    if count < 1:
        raise ValueError("count must be >= 1")
    if count >= n:
        return np.arange(n)
    rng = np.random.default_rng(rng_seed)
    return np.sort(rng.choice(n, size=count, replace=False))


def queries_from_draws(positions, origin, front_dist, behind_dist, sight_frac):
    """Place (sight, front, behind) queries for anchors at ``positions``.

    With u the unit vector from an anchor p towards the sensor c:
    front = p + a u, behind = p - b u, sight = c + s (front - c).
    """
    u = origin - positions
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    front = positions + front_dist[:, None] * u
    behind = positions - behind_dist[:, None] * u
    sight = origin + sight_frac[:, None] * (front - origin)
    return sight, front, behind


def sample_visibility_queries(cloud: PointCloud, delta=DEFAULT_DELTA, rng_seed=0, anchors_per_frame=2048):
    """Three queries per sampled anchor, interleaved as sight, front, behind.

    Anchors within ``delta`` of the sensor are dropped.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    if cloud.sensor_origin is None:
        raise MissingOriginError(f"frame {cloud.frame_id!r} has no sensor origin")
    rng = np.random.default_rng(rng_seed)
    origin = cloud.sensor_origin
    far = np.flatnonzero(np.linalg.norm(cloud.positions - origin, axis=1) > delta)
    pick = subsample_anchors(len(far), anchors_per_frame, rng.integers(2**63))
    anchors = far[pick]
    k = len(anchors)
    a = rng.uniform(0.0, delta, k)
    b = rng.uniform(0.0, delta, k)
    s = rng.uniform(0.0, 1.0, k)
    sight, front, behind = queries_from_draws(cloud.positions[anchors], origin, a, b, s)
    positions = np.stack([sight, front, behind], axis=1).reshape(-1, 3)
    roles = np.tile([SIGHT, FRONT, BEHIND], k)
    labels = (roles == BEHIND).astype(np.int64)
    return QuerySet(positions, labels, np.repeat(anchors, 3), roles, float(delta), cloud.frame_id)
