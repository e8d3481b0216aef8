"""Rotating-lidar simulator over analytic scenes.

Scenes are a ground plane plus yawed boxes, vertical cylinders and spheres.
Boxes and cylinders are anchored at their bottom centre; spheres at their
centre. Every primitive carries a class id from ``CLASS_NAMES``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import PointCloud

CLASS_NAMES = ("ground", "building", "car", "pole", "vegetation", "pedestrian")
KINDS = ("ground_plane", "box", "cylinder", "sphere")
_EPS = 1e-9


class SceneGenerationError(RuntimeError):
    pass


@dataclass
class ScenePrimitive:
    kind: str
    translation: tuple = (0.0, 0.0, 0.0)
    yaw: float = 0.0
    dimensions: tuple = ()
    class_id: int = 0
    solid: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.translation = tuple(float(v) for v in self.translation)
        self.dimensions = tuple(float(v) for v in self.dimensions)
        need = {"ground_plane": 0, "box": 3, "cylinder": 2, "sphere": 1}[self.kind]
        if len(self.dimensions) != need:
            raise ValueError(f"{self.kind} takes {need} dimensions, got {self.dimensions}")
        if any(d <= 0 for d in self.dimensions):
            raise ValueError("primitive dimensions must be positive")
        if not 0 <= self.class_id < len(CLASS_NAMES):
            raise ValueError(f"class id {self.class_id} outside the class table")

    def aabb(self):
        """Axis-aligned bounds (lo, hi); infinite for the ground plane."""
        t = np.array(self.translation)
        if self.kind == "ground_plane":
            return np.array([-np.inf, -np.inf, -np.inf]), np.array([np.inf, np.inf, t[2]])
        if self.kind == "box":
            l, w, h = self.dimensions
            c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
            ex, ey = (l * c + w * s) / 2, (l * s + w * c) / 2
            return t + [-ex, -ey, 0.0], t + [ex, ey, h]
        if self.kind == "cylinder":
            r, h = self.dimensions
            return t + [-r, -r, 0.0], t + [r, r, h]
        r = self.dimensions[0]
        return t - r, t + r


@dataclass
class Scene:
    primitives: list
    bounds: tuple = (-40.0, -40.0, 40.0, 40.0)

    def __post_init__(self):
        if not any(p.kind == "ground_plane" for p in self.primitives):
            raise ValueError("a scene needs at least one ground plane")

    def to_json(self):
        return json.dumps({"bounds": list(self.bounds), "primitives": [asdict(p) for p in self.primitives]}, indent=1)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        return cls([ScenePrimitive(**p) for p in doc["primitives"]], tuple(doc["bounds"]))


@dataclass
class LidarModel:
    beam_count: int = 32
    elevation_min: float = math.radians(-30.0)
    elevation_max: float = math.radians(10.0)
    azimuth_steps: int = 360
    max_range: float = 40.0
    mount_height: float = 1.8
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.beam_count < 1:
            raise ValueError("beam_count must be >= 1")
        if self.beam_count > 1 and not self.elevation_min < self.elevation_max:
            raise ValueError("elevation_min must be below elevation_max")
        if self.max_range <= 0 or self.azimuth_steps < 1 or self.noise_sigma < 0:
            raise ValueError("invalid lidar model")

    @property
    def origin(self):
        return np.array([0.0, 0.0, self.mount_height])

    def directions(self):
        elev = np.linspace(self.elevation_min, self.elevation_max, self.beam_count)
        azim = np.arange(self.azimuth_steps) * (2 * math.pi / self.azimuth_steps)
        e, a = np.meshgrid(elev, azim, indexing="ij")
        e, a = e.reshape(-1), a.reshape(-1)
        return np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=1)


def source_lidar(**overrides):
    """32 beams mounted at 1.8 m."""
    kw = dict(beam_count=32, elevation_min=math.radians(-30.0), elevation_max=math.radians(10.0), mount_height=1.8)
    kw.update(overrides)
    return LidarModel(**kw)


def target_lidar(**overrides):
    """64 beams mounted at 1.7 m."""
    kw = dict(beam_count=64, elevation_min=math.radians(-25.0), elevation_max=math.radians(3.0), mount_height=1.7)
    kw.update(overrides)
    return LidarModel(**kw)


# ---------------------------------------------------------------- ray casting


def _to_local(prim, pts, dirs=None):
    """Express world points (and directions) in the primitive's yawed frame."""
    t = np.array(prim.translation)
    c, s = math.cos(prim.yaw), math.sin(prim.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> local
    local = (pts - t) @ rot.T
    return local if dirs is None else (local, dirs @ rot.T)


def _intersect(prim, origin, dirs):
    """Distance along each unit ray to the primitive's surface; inf on miss."""
    n = len(dirs)
    t_hit = np.full(n, np.inf)
    if prim.kind == "ground_plane":
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (prim.translation[2] - origin[2]) / dz
        ok = (dz < 0) & (t > _EPS)
        t_hit[ok] = t[ok]
        return t_hit
    o, d = _to_local(prim, origin[None, :], dirs)
    o = np.broadcast_to(o, d.shape)
    if prim.kind == "box":
        l, w, h = prim.dimensions
        lo = np.array([-l / 2, -w / 2, 0.0])
        hi = np.array([l / 2, w / 2, h])
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t1 = (lo - o) * inv
            t2 = (hi - o) * inv
        # rays parallel to a slab: inside -> (-inf, inf), outside -> empty
        par = d == 0
        inside = (o >= lo) & (o <= hi)
        t1 = np.where(par, np.where(inside, -np.inf, np.inf), t1)
        t2 = np.where(par, np.where(inside, np.inf, -np.inf), t2)
        tn = np.minimum(t1, t2).max(axis=1)
        tf = np.maximum(t1, t2).min(axis=1)
        ok = (tn <= tf) & (tn > _EPS)
        t_hit[ok] = tn[ok]
        return t_hit
    if prim.kind == "cylinder":
        r, h = prim.dimensions
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
        c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
        disc = b * b - 4 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            ts = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
        z = o[:, 2] + ts * d[:, 2]
        side = (a > 0) & (disc >= 0) & (ts > _EPS) & (z >= 0) & (z <= h)
        t_hit[side] = ts[side]
        for zc in (0.0, h):
            with np.errstate(divide="ignore", invalid="ignore"):
                tc = (zc - o[:, 2]) / d[:, 2]
            px = o[:, 0] + tc * d[:, 0]
            py = o[:, 1] + tc * d[:, 1]
            cap = (d[:, 2] != 0) & (tc > _EPS) & (px * px + py * py <= r * r)
            t_hit = np.where(cap & (tc < t_hit), tc, t_hit)
        return t_hit
    r = prim.dimensions[0]
    b = 2 * (o * d).sum(axis=1)
    c = (o * o).sum(axis=1) - r * r
    disc = b * b - 4 * c
    ts = (-b - np.sqrt(np.maximum(disc, 0))) / 2
    ok = (disc >= 0) & (ts > _EPS)
    t_hit[ok] = ts[ok]
    return t_hit


def cast_scan(scene: Scene, lidar: LidarModel, seed=0, domain="source", frame_id=""):
    """Ray-cast one revolution; nearest hit within ``max_range`` per ray.

    Along-ray noise is Gaussian with ``noise_sigma``, truncated at 3 sigma.
    """
    origin = lidar.origin
    dirs = lidar.directions()
    best = np.full(len(dirs), np.inf)
    cls = np.full(len(dirs), -1, dtype=np.int64)
    for prim in scene.primitives:
        t = _intersect(prim, origin, dirs)
        closer = t < best
        best[closer] = t[closer]
        cls[closer] = prim.class_id
    hit = best <= lidar.max_range
    t = best[hit]
    if lidar.noise_sigma > 0:
        rng = np.random.default_rng(seed)
        noise = np.clip(rng.standard_normal(len(t)), -3.0, 3.0) * lidar.noise_sigma
        t = t + noise
    positions = origin + t[:, None] * dirs[hit]
    return PointCloud(positions, origin, cls[hit], domain=domain, frame_id=frame_id)


# ------------------------------------------------------------------ occupancy


def inside_primitive(prim, points):
    """Strict interior test (surface points count as empty)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if prim.kind == "ground_plane":
        return points[:, 2] < prim.translation[2]
    p = _to_local(prim, points)
    if prim.kind == "box":
        l, w, h = prim.dimensions
        return (np.abs(p[:, 0]) < l / 2) & (np.abs(p[:, 1]) < w / 2) & (p[:, 2] > 0) & (p[:, 2] < h)
    if prim.kind == "cylinder":
        r, h = prim.dimensions
        return (p[:, 0] ** 2 + p[:, 1] ** 2 < r * r) & (p[:, 2] > 0) & (p[:, 2] < h)
    r = prim.dimensions[0]
    return (p ** 2).sum(axis=1) < r * r


def occupancy_oracle(scene: Scene, points):
    """True (full) where a point is inside any solid primitive."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    full = np.zeros(len(points), dtype=bool)
    for prim in scene.primitives:
        if prim.solid:
            full |= inside_primitive(prim, points)
    return full


def signed_distance(prim, points):
    """Exact signed distance to a primitive's surface (negative inside)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if prim.kind == "ground_plane":
        return points[:, 2] - prim.translation[2]
    p = _to_local(prim, points)
    if prim.kind == "box":
        l, w, h = prim.dimensions
        q = np.abs(p - [0.0, 0.0, h / 2]) - [l / 2, w / 2, h / 2]
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)
    if prim.kind == "cylinder":
        r, h = prim.dimensions
        q = np.stack([np.hypot(p[:, 0], p[:, 1]) - r, np.abs(p[:, 2] - h / 2) - h / 2], axis=1)
        return np.linalg.norm(np.maximum(q, 0.0), axis=1) + np.minimum(q.max(axis=1), 0.0)
    return np.linalg.norm(p, axis=1) - prim.dimensions[0]


# ------------------------------------------------------------------ generation


@dataclass
class ObjectSpec:
    count: int
    size_min: tuple
    size_max: tuple
    range_min: float = 3.0
    range_max: float = 30.0


def default_object_specs():
    return {
        "building": ObjectSpec(4, (6.0, 4.0, 4.0), (15.0, 10.0, 10.0), 12.0, 32.0),
        "car": ObjectSpec(8, (3.8, 1.6, 1.3), (4.8, 2.0, 1.7), 4.0, 25.0),
        "pole": ObjectSpec(10, (0.1, 4.0), (0.2, 7.0), 3.0, 25.0),
        "vegetation": ObjectSpec(6, (1.0,), (2.5,), 5.0, 28.0),
        "pedestrian": ObjectSpec(6, (0.25, 1.6), (0.35, 1.9), 3.0, 20.0),
    }


@dataclass
class SceneSpec:
    objects: dict = field(default_factory=default_object_specs)
    bounds: tuple = (-40.0, -40.0, 40.0, 40.0)
    clearance: float = 0.3
    sensor_clearance: float = 2.0
    max_attempts: int = 1000


_KIND_OF = {"building": "box", "car": "box", "pole": "cylinder", "vegetation": "sphere", "pedestrian": "cylinder"}


def _xy_overlap(a, b, margin):
    (alo, ahi), (blo, bhi) = a, b
    return bool(np.all(alo[:2] - margin < bhi[:2]) and np.all(blo[:2] - margin < ahi[:2]))


def generate_scene(seed, spec: SceneSpec | None = None):
    """Rejection-sample non-overlapping objects (xy footprints disjoint) on a ground plane."""
    spec = spec or SceneSpec()
    rng = np.random.default_rng(seed)
    prims = [ScenePrimitive("ground_plane", (0.0, 0.0, 0.0), 0.0, (), CLASS_NAMES.index("ground"))]
    placed = []
    sensor_box = (np.array([-spec.sensor_clearance] * 2 + [0.0]), np.array([spec.sensor_clearance] * 2 + [0.0]))
    for cname, ospec in spec.objects.items():
        cid = CLASS_NAMES.index(cname)
        kind = _KIND_OF[cname]
        for k in range(ospec.count):
            for _attempt in range(spec.max_attempts):
                dims = tuple(rng.uniform(ospec.size_min, ospec.size_max))
                rad = rng.uniform(ospec.range_min, ospec.range_max)
                ang = rng.uniform(0, 2 * math.pi)
                x, y = rad * math.cos(ang), rad * math.sin(ang)
                yaw = float(rng.uniform(-math.pi, math.pi)) if kind == "box" else 0.0
                z = 0.0
                if kind == "sphere":
                    z = float(rng.uniform(0.5, 1.0)) * dims[0]
                prim = ScenePrimitive(kind, (x, y, z), yaw, dims, cid)
                box = prim.aabb()
                b = spec.bounds
                if box[0][0] < b[0] or box[0][1] < b[1] or box[1][0] > b[2] or box[1][1] > b[3]:
                    continue
                if _xy_overlap(box, sensor_box, 0.0):
                    continue
                if any(_xy_overlap(box, other, spec.clearance) for other in placed):
                    continue
                prims.append(prim)
                placed.append(box)
                break
            else:
                raise SceneGenerationError(
                    f"could not place {cname} #{k} after {spec.max_attempts} attempts (seed {seed})"
                )
    return Scene(prims, tuple(spec.bounds))
