"""Frames as the training loop sees them, and synthetic split generation."""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import PointCloud, voxel_downsample
from .lidar_sim import LidarModel, SceneSpec, cast_scan, generate_scene
from .model import FrameGraph, ModelConfig, prepare_frame

DEFAULT_VOXEL = 0.1


def sub_seed(seed, name):
    """Deterministic child seed for a named purpose."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1, np.uint64)[0])


def named_rng(seed, name):
    return np.random.default_rng(sub_seed(seed, name))


@dataclass
class Frame:
    """A raw scan, its voxel representatives, and the raw -> representative map."""

    raw: PointCloud
    rep: PointCloud
    mapping: np.ndarray
    _graph: FrameGraph | None = field(default=None, repr=False)
    _graph_key: tuple | None = field(default=None, repr=False)

    @property
    def frame_id(self):
        return self.raw.frame_id

    @property
    def domain(self):
        return self.raw.domain

    def graph(self, config: ModelConfig) -> FrameGraph:
        key = (config.radii, config.density_radius, config.surf_radius, config.features)
        if self._graph is None or self._graph_key != key:
            self._graph = prepare_frame(self.rep, config)
            self._graph_key = key
        return self._graph

    def unlabeled(self):
        return Frame(self.raw.without_labels(), self.rep.without_labels(), self.mapping, self._graph, self._graph_key)

    def __len__(self):
        return len(self.rep)


def make_frame(cloud: PointCloud, voxel_size=DEFAULT_VOXEL):
    rep, mapping = voxel_downsample(cloud, voxel_size)
    return Frame(cloud, rep, mapping)


def make_frames(clouds, voxel_size=DEFAULT_VOXEL):
    return [make_frame(c, voxel_size) for c in clouds]


def simulate_split(n_frames, lidar: LidarModel, seed, domain, name, scene_spec: SceneSpec | None = None):
    """``n_frames`` scans of independently drawn scenes; ids ``{name}_{k:04d}``."""
    clouds = []
    for k in range(n_frames):
        scene = generate_scene(sub_seed(seed, f"{name}/scene/{k}"), scene_spec)
        cloud = cast_scan(scene, lidar, seed=sub_seed(seed, f"{name}/noise/{k}"), domain=domain,
                          frame_id=f"{name}_{k:04d}")
        # stored on disk as float32; keep memory and disk identical
        clouds.append(replace(cloud, positions=cloud.positions.astype(np.float32).astype(np.float64),
                              sensor_origin=cloud.sensor_origin.astype(np.float32).astype(np.float64)))
    return clouds
