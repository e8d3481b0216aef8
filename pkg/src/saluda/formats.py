"""Point-cloud file formats, class remapping and exports.

Native ``SLPC`` layout (little endian)::

    magic  b"SLPC"
    u32    version (1)
    u64    point count N
    3*f32  sensor origin
    u32    flags (bit 0: labels present, bit 1: origin absent)
    N*3*f32 positions
    N*u16  labels (if bit 0)
"""
from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .geometry import IGNORE_ID, PointCloud
from .nn import BNMode

MAGIC = b"SLPC"
VERSION = 1
_HEADER = struct.Struct("<4sIQ3fI")
FLAG_LABELS = 1
FLAG_NO_ORIGIN = 2


class FormatError(ValueError):
    """Malformed input file; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


# ------------------------------------------------------------ native format


def native_bytes(cloud: PointCloud):
    flags = 0
    if cloud.labels is not None:
        if np.any((cloud.labels < 0) | (cloud.labels > 0xFFFF)):
            raise FormatError("labels do not fit in u16")
        flags |= FLAG_LABELS
    origin = cloud.sensor_origin
    if origin is None:
        flags |= FLAG_NO_ORIGIN
        origin = np.zeros(3)
    parts = [_HEADER.pack(MAGIC, VERSION, len(cloud), *np.asarray(origin, np.float32).tolist(), flags),
             cloud.positions.astype("<f4").tobytes()]
    if cloud.labels is not None:
        parts.append(cloud.labels.astype("<u2").tobytes())
    return b"".join(parts)


def parse_native(raw: bytes, domain="source", frame_id=""):
    if len(raw) < _HEADER.size:
        raise FormatError(f"truncated header: expected {_HEADER.size} bytes, got {len(raw)}", len(raw))
    magic, version, n, ox, oy, oz, flags = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if flags & ~(FLAG_LABELS | FLAG_NO_ORIGIN):
        raise FormatError(f"unknown flag bits {flags:#x}", 24)
    has_labels = bool(flags & FLAG_LABELS)
    expected = _HEADER.size + n * 12 + (n * 2 if has_labels else 0)
    if len(raw) != expected:
        what = "truncated" if len(raw) < expected else "trailing bytes in"
        raise FormatError(f"{what} file: expected {expected} bytes, got {len(raw)}", min(len(raw), expected))
    off = _HEADER.size
    pos = np.frombuffer(raw, "<f4", n * 3, off).reshape(n, 3).astype(np.float64)
    if not np.all(np.isfinite(pos)):
        raise FormatError("non-finite coordinates", off)
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, "<u2", n, off + n * 12).astype(np.int64)
    origin = None if flags & FLAG_NO_ORIGIN else np.array([ox, oy, oz], dtype=np.float64)
    if origin is not None and not np.all(np.isfinite(origin)):
        raise FormatError("non-finite sensor origin", 16)
    return PointCloud(pos, origin, labels, domain, frame_id)


def write_native(path, cloud: PointCloud):
    with open(path, "wb") as f:
        f.write(native_bytes(cloud))


def read_native(path, domain="source", frame_id=None):
    with open(path, "rb") as f:
        raw = f.read()
    if frame_id is None:
        frame_id = os.path.splitext(os.path.basename(path))[0]
    return parse_native(raw, domain, frame_id)


# ------------------------------------------------------------ class maps


@dataclass
class ClassMap:
    """Total mapping from raw label ids to contiguous train ids."""

    mapping: dict
    names: tuple
    ignore_id: int = IGNORE_ID
    description: str = ""
    _lut: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mapping = {int(k): int(v) for k, v in self.mapping.items()}
        self.names = tuple(self.names)
        used = {v for v in self.mapping.values() if v != self.ignore_id}
        if used != set(range(len(self.names))):
            raise FormatError(f"train ids must cover [0, {len(self.names)}) exactly, got {sorted(used)}")
        if 0 <= self.ignore_id < len(self.names):
            raise FormatError("ignore id collides with a train id")

    @property
    def num_classes(self):
        return len(self.names)

    def apply(self, raw_labels):
        raw = np.asarray(raw_labels, dtype=np.int64)
        out = np.full(raw.shape, self.ignore_id, dtype=np.int64)
        for k, v in self.mapping.items():
            out[raw == k] = v
        return out

    @classmethod
    def from_dict(cls, doc):
        unknown = set(doc) - {"mapping", "names", "ignore_id", "description"}
        if unknown:
            raise FormatError(f"unknown class-map keys {sorted(unknown)}")
        return cls(doc["mapping"], doc["names"], doc.get("ignore_id", IGNORE_ID), doc.get("description", ""))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def builtin(cls, name):
        """Bundled maps: ``kitti6`` (the synthetic classes) and ``kitti_ns10``."""
        text = resources.files("saluda").joinpath("classmaps").joinpath(f"{name}.json").read_text()
        return cls.from_dict(json.loads(text))

    def to_dict(self):
        return {"mapping": {str(k): v for k, v in sorted(self.mapping.items())}, "names": list(self.names),
                "ignore_id": self.ignore_id, "description": self.description}


def identity_class_map(names):
    return ClassMap({k: k for k in range(len(names))}, names)


# ------------------------------------------------------------ SemanticKITTI


def read_kitti_scan(bin_path, label_path=None, class_map: ClassMap | None = None, domain="target",
                    frame_id=None):
    """A velodyne ``.bin`` scan (x, y, z, intensity as f32) and optional ``.label``.

    Intensity is dropped. The semantic class is the low 16 bits of each
    label word; it is remapped through ``class_map``.
    """
    raw = np.fromfile(bin_path, dtype="<f4")
    if raw.size % 4:
        raise FormatError(f"{bin_path}: size {raw.size * 4} is not a multiple of 16 bytes")
    pos = raw.reshape(-1, 4)[:, :3].astype(np.float64)
    labels = None
    if label_path is not None:
        words = np.fromfile(label_path, dtype="<u4")
        if len(words) != len(pos):
            raise FormatError(f"{label_path}: {len(words)} labels for {len(pos)} points")
        semantic = (words & 0xFFFF).astype(np.int64)
        labels = class_map.apply(semantic) if class_map is not None else semantic
    if frame_id is None:
        frame_id = os.path.splitext(os.path.basename(bin_path))[0]
    return PointCloud(pos, np.zeros(3), labels, domain, frame_id)


def write_kitti_scan(bin_path, positions, label_path=None, raw_labels=None, intensity=None):
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    inten = np.zeros(len(pos)) if intensity is None else np.asarray(intensity)
    np.column_stack([pos, inten]).astype("<f4").tofile(bin_path)
    if label_path is not None:
        np.asarray(raw_labels, dtype="<u4").tofile(label_path)


# ------------------------------------------------------------ PLY export

# ground, building, car, pole, vegetation, pedestrian
CLASS_PALETTE = np.array([
    [128, 64, 128],
    [255, 200, 0],
    [100, 150, 245],
    [255, 240, 150],
    [0, 175, 0],
    [255, 30, 30],
], dtype=np.uint8)
IGNORE_COLOR = np.array([0, 0, 0], dtype=np.uint8)
OCCUPANCY_PALETTE = np.array([[0, 0, 255], [255, 0, 0]], dtype=np.uint8)  # empty blue, full red


def colors_for(values, colors_by):
    values = np.asarray(values, dtype=np.int64)
    if colors_by == "occupancy":
        if np.any((values < 0) | (values > 1)):
            raise FormatError("occupancy values must be 0 or 1")
        return OCCUPANCY_PALETTE[values]
    if colors_by not in ("label", "prediction"):
        raise FormatError(f"unknown coloring {colors_by!r}")
    out = np.tile(IGNORE_COLOR, (len(values), 1))
    ok = (values >= 0) & (values < len(CLASS_PALETTE))
    out[ok] = CLASS_PALETTE[values[ok]]
    return out


def export_ply(path, positions, values=None, colors_by="label"):
    """ASCII PLY with ``x y z red green blue`` per vertex."""
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3).astype(np.float32)
    if values is None:
        rgb = np.tile(IGNORE_COLOR, (len(pos), 1))
    else:
        rgb = colors_for(values, colors_by)
        if len(rgb) != len(pos):
            raise FormatError(f"{len(rgb)} values for {len(pos)} vertices")
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"comment colored by {colors_by}\n")
        f.write(f"element vertex {len(pos)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        for p, c in zip(pos.tolist(), rgb.tolist()):
            f.write(f"{p[0]!r} {p[1]!r} {p[2]!r} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path):
    """Minimal reader for the ASCII files written by ``export_ply``."""
    with open(path) as f:
        lines = f.read().splitlines()
    try:
        end = lines.index("end_header")
    except ValueError:
        raise FormatError(f"{path}: missing end_header") from None
    n = next(int(l.split()[2]) for l in lines[:end] if l.startswith("element vertex"))
    rows = [l.split() for l in lines[end + 1:end + 1 + n]]
    if len(rows) != n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(rows)}")
    pos = np.array([[float(v) for v in r[:3]] for r in rows], dtype=np.float64).reshape(-1, 3)
    rgb = np.array([[int(v) for v in r[3:6]] for r in rows], dtype=np.uint8).reshape(-1, 3)
    return pos, rgb


# ------------------------------------------------------------ latents


def dump_latents(net, frames, path):
    """One CSV row per representative point: frame id, class, latent vector."""
    d = net.config.latent_dim
    rows = 0
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame_id", "class"] + [f"z{k}" for k in range(d)])
        for fr in frames:
            z = net.backbone(fr.graph(net.config), BNMode.EVAL_FROZEN).data
            labels = fr.rep.labels if fr.rep.labels is not None else np.full(len(z), IGNORE_ID)
            for lab, vec in zip(labels.tolist(), z.tolist()):
                w.writerow([fr.frame_id, lab] + [repr(v) for v in vec])
            rows += len(z)
    return rows
