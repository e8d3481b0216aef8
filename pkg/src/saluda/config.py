"""Strict JSON experiment configuration."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .model import ModelConfig
from .training import BnAdaptConfig, ConfigError, SelfTrainConfig, TrainConfig
from .validators import DEFAULT_GRID, KINDS

SEED_ENV = "SALUDA_SEED"

# JSON key -> dataclass attribute, where they differ
_RENAMES = {TrainConfig: {"lambda": "lam"}}
# attributes set from the global seed, not from the file
_HIDDEN = {TrainConfig: {"seed"}, SelfTrainConfig: {"seed"}}


@dataclass
class DatasetSpec:
    """Where a split comes from.

    ``synthetic`` splits are produced by ``simulate`` into
    ``<output_dir>/data/<split>``; ``native`` reads ``*.slpc`` files from
    ``path``; ``kitti`` reads ``path/velodyne/*.bin`` with matching
    ``path/labels/*.label``.
    """

    kind: str = "synthetic"
    path: str = ""
    frames: int = 40
    lidar: str = "source"
    azimuth_steps: int = 90
    noise_sigma: float = 0.02

    def validate(self, name):
        if self.kind not in ("synthetic", "native", "kitti"):
            raise ConfigError(f"data.{name}.kind: unknown dataset kind {self.kind!r}")
        if self.kind == "synthetic":
            if self.lidar not in ("source", "target"):
                raise ConfigError(f"data.{name}.lidar must be 'source' or 'target'")
            if self.frames < 1 or self.azimuth_steps < 1 or self.noise_sigma < 0:
                raise ConfigError(f"data.{name}: frames and azimuth_steps must be positive, noise >= 0")
        elif not os.path.isdir(self.path):
            raise ConfigError(f"data.{name}.path: directory {self.path!r} does not exist")


def _default_data():
    return {
        "source": DatasetSpec(frames=40, lidar="source"),
        "target": DatasetSpec(frames=40, lidar="target"),
        "target_val": DatasetSpec(frames=20, lidar="target"),
        "source_val": DatasetSpec(frames=10, lidar="source"),
    }


SPLITS = ("source", "target", "target_val", "source_val")
SPLIT_DOMAIN = {"source": "source", "source_val": "source", "target": "target", "target_val": "target"}


@dataclass
class EvalOptions:
    bands: list = field(default_factory=lambda: [[0.0, 7.5], [7.5, 15.0], [15.0, 30.0], [30.0, 50.0]])
    distance: str = "3d"

    def validate(self):
        if self.distance not in ("3d", "xy"):
            raise ConfigError("eval.distance must be '3d' or 'xy'")


@dataclass
class SweepOptions:
    grid: list = field(default_factory=lambda: list(DEFAULT_GRID))
    seeds_per_lambda: int = 2
    validator: str = "entropy"

    def validate(self):
        if not self.grid or any(v < 0 for v in self.grid):
            raise ConfigError("sweep.grid must be a non-empty list of values >= 0")
        if self.seeds_per_lambda < 1:
            raise ConfigError("sweep.seeds_per_lambda must be positive")
        if self.validator not in KINDS:
            raise ConfigError(f"sweep.validator must be one of {KINDS}")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    voxel_size: float = 0.1
    class_map: str | None = None
    data: dict = field(default_factory=_default_data)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(base_lr=5e-3, total_iterations=1600,
                                                                   anchors_per_frame=128))
    selftrain: SelfTrainConfig = field(default_factory=SelfTrainConfig)
    bn_adapt: BnAdaptConfig = field(default_factory=BnAdaptConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    sweep: SweepOptions = field(default_factory=SweepOptions)

    def validate(self):
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be positive")
        missing = [s for s in ("source",) if s not in self.data]
        if missing:
            raise ConfigError(f"data: missing split(s) {missing}")
        for name, spec in self.data.items():
            if name not in SPLITS:
                raise ConfigError(f"data: unknown split {name!r}; expected a subset of {SPLITS}")
            spec.validate(name)
        if self.class_map is not None and not self.class_map.startswith("builtin:") \
                and not os.path.isfile(self.class_map):
            raise ConfigError(f"class_map: file {self.class_map!r} does not exist")
        self.train.validate()
        self.selftrain.validate()
        self.bn_adapt.validate()
        self.eval.validate()
        self.sweep.validate()
        return self


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    renames = _RENAMES.get(cls, {})
    hidden = _HIDDEN.get(cls, set())
    allowed = ({f.name for f in fields(cls)} - hidden - set(renames.values())) | set(renames)
    kwargs = {}
    for key, value in doc.items():
        if key not in allowed:
            raise ConfigError(f"{where}: unknown key {key!r}")
        kwargs[renames.get(key, key)] = value
    try:
        obj = cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    for f in fields(cls):
        v = getattr(obj, f.name)
        if isinstance(v, list) and f.name in ("widths", "radii"):
            setattr(obj, f.name, tuple(v))
    return obj


def _dump(obj):
    doc = asdict(obj)
    for attr in _HIDDEN.get(type(obj), ()):
        doc.pop(attr)
    for key, attr in _RENAMES.get(type(obj), {}).items():
        doc[key] = doc.pop(attr)
    return doc


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "selftrain": SelfTrainConfig,
             "bn_adapt": BnAdaptConfig, "eval": EvalOptions, "sweep": SweepOptions}


def config_from_dict(doc, env=None) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    env = os.environ if env is None else env
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, key)
        elif key == "data":
            if not isinstance(value, dict):
                raise ConfigError("data: expected an object")
            kwargs["data"] = {name: _build(DatasetSpec, spec, f"data.{name}") for name, spec in value.items()}
        elif key in ("seed", "output_dir", "voxel_size", "class_map"):
            kwargs[key] = value
        else:
            raise ConfigError(f"config: unknown key {key!r}")
    cfg = ExperimentConfig(**kwargs)
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed must be an integer")
    return cfg.validate()


def config_to_dict(cfg: ExperimentConfig):
    doc = {"seed": cfg.seed, "output_dir": cfg.output_dir, "voxel_size": cfg.voxel_size,
           "class_map": cfg.class_map,
           "data": {k: asdict(v) for k, v in cfg.data.items()}}
    for key in _SECTIONS:
        doc[key] = _dump(getattr(cfg, key))
    return doc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc, overrides):
    """Apply ``key.path=value`` strings to a raw config dict (values parsed as JSON when possible)."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, text = item.split("=", 1)
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(text)
    return doc


def load_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path`` (if any), then ``--set`` overrides."""
    doc = config_to_dict(ExperimentConfig())
    doc.pop("class_map")
    if path is not None:
        with open(path) as f:
            try:
                user = json.load(f)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        doc = _merge(doc, user, "")
    doc = _merge(doc, apply_overrides({}, overrides), "")
    return config_from_dict(doc, env)


def _merge(base, user, where):
    out = dict(base)
    for k, v in user.items():
        if k == "data" and isinstance(v, dict):
            # a split given in the file replaces unspecified defaults field by field
            merged = dict(base.get("data", {}))
            for split, spec in v.items():
                if spec is None:
                    merged.pop(split, None)
                elif isinstance(spec, dict) and isinstance(merged.get(split), dict):
                    merged[split] = {**merged[split], **spec}
                else:
                    merged[split] = spec
            out["data"] = merged
        elif isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out
