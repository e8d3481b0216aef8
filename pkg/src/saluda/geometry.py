"""Point clouds, voxel hashing and fixed-radius neighbour queries."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

IGNORE_ID = 255
_BITS = 21
_OFFSET = 1 << (_BITS - 1)
_MASK = (1 << _BITS) - 1


@dataclass
class PointCloud:
    positions: np.ndarray
    sensor_origin: np.ndarray | None = None
    labels: np.ndarray | None = None
    domain: str = "source"
    frame_id: str = ""

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.positions)):
            raise ValueError(f"frame {self.frame_id!r}: non-finite coordinates")
        if self.sensor_origin is not None:
            self.sensor_origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.positions):
                raise ValueError(
                    f"frame {self.frame_id!r}: {len(self.labels)} labels for {len(self.positions)} points"
                )
        if self.domain not in ("source", "target"):
            raise ValueError(f"unknown domain {self.domain!r}")

    def __len__(self):
        return len(self.positions)

    def without_labels(self):
        return replace(self, labels=None)


def voxel_coords(positions, voxel_size):
    return np.floor(np.asarray(positions) / voxel_size).astype(np.int64)


def pack_keys(coords):
    c = np.asarray(coords, dtype=np.int64) + _OFFSET
    if np.any(c < 0) or np.any(c > _MASK):
        raise ValueError("voxel coordinates exceed the packable range")
    return (c[..., 0] << (2 * _BITS)) | (c[..., 1] << _BITS) | c[..., 2]


def unpack_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([(keys >> (2 * _BITS)) & _MASK, (keys >> _BITS) & _MASK, keys & _MASK], axis=-1) - _OFFSET


@dataclass(frozen=True)
class VoxelIndex:
    """Immutable voxel hash: sorted voxel keys with per-voxel runs of point indices."""

    voxel_size: float
    positions: np.ndarray
    order: np.ndarray = field(repr=False)
    keys: np.ndarray = field(repr=False)
    starts: np.ndarray = field(repr=False)

    @cached_property
    def buckets(self):
        """dict voxel coordinate tuple -> list of point indices."""
        coords = unpack_keys(self.keys)
        out = {}
        for j, c in enumerate(coords):
            out[tuple(int(v) for v in c)] = self.order[self.starts[j]:self.starts[j + 1]].tolist()
        return out

    def bucket_of(self, point):
        c = voxel_coords(np.asarray(point, dtype=np.float64).reshape(1, 3), self.voxel_size)[0]
        return self.buckets.get(tuple(int(v) for v in c), [])

    def __len__(self):
        return len(self.positions)


def build_index(cloud_or_positions, voxel_size):
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    pos = cloud_or_positions.positions if isinstance(cloud_or_positions, PointCloud) else cloud_or_positions
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 3)
    keys = pack_keys(voxel_coords(pos, voxel_size))
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    uniq, starts = np.unique(sorted_keys, return_index=True)
    starts = np.append(starts, len(pos)).astype(np.int64)
    return VoxelIndex(float(voxel_size), pos, order, uniq, starts)


def voxel_downsample(cloud: PointCloud, voxel_size, ignore_id=IGNORE_ID):
    """One centroid per occupied voxel; returns (cloud, original -> representative map).

    Representative labels are the voxel's majority label, ties going to the
    smallest id.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    n = len(cloud)
    if n == 0:
        return replace(cloud), np.zeros(0, dtype=np.int64)
    keys = pack_keys(voxel_coords(cloud.positions, voxel_size))
    _, inverse = np.unique(keys, return_inverse=True)
    inverse = inverse.reshape(-1)
    m = int(inverse.max()) + 1
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    centroid = np.stack([np.bincount(inverse, weights=cloud.positions[:, k], minlength=m) for k in range(3)], axis=1)
    centroid /= counts[:, None]
    labels = None
    if cloud.labels is not None:
        pairs, pair_counts = np.unique(np.stack([inverse, cloud.labels], axis=1), axis=0, return_counts=True)
        # sort by voxel, then count descending, then label ascending
        order = np.lexsort((pairs[:, 1], -pair_counts, pairs[:, 0]))
        pairs = pairs[order]
        first = np.ones(len(pairs), dtype=bool)
        first[1:] = pairs[1:, 0] != pairs[:-1, 0]
        labels = np.full(m, ignore_id, dtype=np.int64)
        labels[pairs[first, 0]] = pairs[first, 1]
    return replace(cloud, positions=centroid, labels=labels), inverse.astype(np.int64)


def ball_query(index: VoxelIndex, center, radius):
    """Indices with ``||p - center|| <= radius``, ascending."""
    offsets, idx = ball_query_many(index, np.asarray(center, dtype=np.float64).reshape(1, 3), radius)
    return idx


def _cell_offsets(span):
    r = np.arange(-span, span + 1)
    return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1).reshape(-1, 3)


def ball_query_many(index: VoxelIndex, centers, radius):
    """Batched inclusive ball query.

    Returns CSR-style ``(offsets, indices)``: the neighbours of center ``i``
    are ``indices[offsets[i]:offsets[i+1]]`` in ascending point order.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    m = len(centers)
    if m == 0 or len(index) == 0:
        return np.zeros(m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    span = int(math.ceil(radius / index.voxel_size))
    cells = voxel_coords(centers, index.voxel_size)
    cand_keys = pack_keys(cells[:, None, :] + _cell_offsets(span)[None, :, :])  # (M, K)
    slot = np.searchsorted(index.keys, cand_keys)
    slot_c = np.minimum(slot, len(index.keys) - 1)
    hit = index.keys[slot_c] == cand_keys
    center_id = np.broadcast_to(np.arange(m)[:, None], cand_keys.shape)[hit]
    lo = index.starts[slot_c[hit]]
    hi = index.starts[slot_c[hit] + 1]
    lengths = hi - lo
    total = int(lengths.sum())
    if total == 0:
        return np.zeros(m + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    run_start = np.repeat(lo - np.concatenate([[0], np.cumsum(lengths)[:-1]]), lengths)
    flat = run_start + np.arange(total)
    cand_points = index.order[flat]
    cand_centers = np.repeat(center_id, lengths)
    d2 = ((index.positions[cand_points] - centers[cand_centers]) ** 2).sum(axis=1)
    keep = d2 <= radius * radius
    cand_points, cand_centers = cand_points[keep], cand_centers[keep]
    order = np.lexsort((cand_points, cand_centers))
    cand_points, cand_centers = cand_points[order], cand_centers[order]
    offsets = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.bincount(cand_centers, minlength=m), out=offsets[1:])
    return offsets, cand_points


def knn(index: VoxelIndex, center, k):
    """The ``k`` nearest indices, ties broken by index; fewer when the cloud is smaller."""
    if k < 1:
        raise ValueError("k must be >= 1")
    d2 = ((index.positions - np.asarray(center, dtype=np.float64).reshape(1, 3)) ** 2).sum(axis=1)
    order = np.lexsort((np.arange(len(d2)), d2))
    return order[:k]
