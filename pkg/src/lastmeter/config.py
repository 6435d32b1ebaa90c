"""Run configuration: JSON file with every default embedded here."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ROLLOUT_GRID, TRAINING_GRID, InvalidArgument, KinematicsConfig, ObjectInstance, rectangle

SEED_ENV = "LASTMETER_SEED"


@dataclass
class GridSpec:
    radial_distances: list[float]
    approach_angles: list[float]
    start_orientations: list[float]


@dataclass
class InstanceSpec:
    instance_id: str
    appearance_seed: int
    scale: float = 1.0
    height: float = 0.9
    category_blend: float = 0.7


@dataclass
class WorldSection:
    step_xy: float = 0.05
    step_theta_deg: float = 5.0
    noise_xy: float = 0.005
    noise_theta_deg: float = 0.5
    goal_distance: float = 0.8
    grid_in_object_frame: bool = True
    category_id: str = "chair"
    footprint_depth: float = 0.45
    footprint_width: float = 0.55
    training_grid: GridSpec = field(default_factory=lambda: GridSpec(**TRAINING_GRID.to_dict()))
    rollout_grid: GridSpec = field(default_factory=lambda: GridSpec(**ROLLOUT_GRID.to_dict()))
    train_instance: InstanceSpec = field(default_factory=lambda: InstanceSpec("green_chair", 1001))
    heldout_count: int = 10
    heldout_seed: int = 2024
    heldout_scale_range: list[float] = field(default_factory=lambda: [0.95, 1.05])
    heldout_height_range: list[float] = field(default_factory=lambda: [0.85, 0.95])
    heldout_category_blend: float = 0.7


@dataclass
class EnvironmentSpec:
    background_seed: int
    feature_noise: float


@dataclass
class SegNoiseSpec:
    dropout_prob: float = 0.0
    jitter_cells: int = 0
    flicker_prob: float = 0.0
    false_positive_prob: float = 0.0


@dataclass
class SensorSection:
    patch_rows: int = 16
    patch_cols: int = 16
    feature_dim: int = 32
    front_fov_deg: float = 120.0
    side_fov_deg: float = 100.0
    vertical_fov_deg: float = 90.0
    camera_height: float = 0.5
    environment: str = "lab"
    environments: dict[str, EnvironmentSpec] = field(default_factory=lambda: {
        "lab": EnvironmentSpec(11, 0.05),
        "outdoor": EnvironmentSpec(23, 0.03),
        "indoor_b": EnvironmentSpec(37, 0.08),
        "dim": EnvironmentSpec(41, 0.2),
    })
    collection_seg_noise: SegNoiseSpec = field(default_factory=SegNoiseSpec)


@dataclass
class DataSection:
    deadband_xy: float = 0.14
    deadband_theta_deg: float = 6.0
    samples_per_step: int = 4
    relabel: bool = False
    max_expert_steps: int = 200


@dataclass
class TrainSection:
    variant: str = "score"
    grid: int = 4
    pool: str = "mean"
    box_hidden: int = 64
    box_dim: int = 256
    head_hidden: list[int] = field(default_factory=lambda: [128, 64])
    attention_heads: int = 4
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 30


@dataclass
class RolloutSection:
    max_steps: int = 200
    consecutive_stops: int = 2
    aux_stop: bool = True
    aux_view: str = "front"
    aux_rule: str = "stop_gated"
    seg_noise: SegNoiseSpec = field(default_factory=SegNoiseSpec)
    workers: int = 1


@dataclass
class EvalSection:
    thresholds_source: str = "dataset"  # "dataset" or "explicit"
    bbox_area_lo: float = 0.0
    bbox_area_hi: float = 0.0
    com_radius: float = 0.0


@dataclass
class RunConfig:
    world: WorldSection = field(default_factory=WorldSection)
    sensor: SensorSection = field(default_factory=SensorSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    rollout: RolloutSection = field(default_factory=RolloutSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 20260101

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        cfg = _build(cls, d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: Path | None = None, apply_env: bool = True) -> "RunConfig":
        cfg = cls() if path is None else cls.from_dict(json.loads(Path(path).read_text()))
        if apply_env and os.environ.get(SEED_ENV):
            cfg.seed = int(os.environ[SEED_ENV])
        return cfg

    def validate(self) -> None:
        if self.sensor.environment not in self.sensor.environments:
            raise InvalidArgument(f"unknown environment {self.sensor.environment!r}")
        if self.train.variant not in ("score", "attention"):
            raise InvalidArgument("train.variant must be 'score' or 'attention'")
        ids = [self.world.train_instance.instance_id] + [i.instance_id for i in heldout_specs(self)]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("instance ids must be unique")
        if self.rollout.aux_rule not in ("stop_gated", "conjunction"):
            raise InvalidArgument("rollout.aux_rule must be 'stop_gated' or 'conjunction'")
        if self.train.grid < 1:
            raise InvalidArgument("train.grid must be >= 1")
        if self.eval.thresholds_source not in ("dataset", "explicit"):
            raise InvalidArgument("eval.thresholds_source must be 'dataset' or 'explicit'")

    # --- derived objects ---------------------------------------------------

    def kinematics(self) -> KinematicsConfig:
        w = self.world
        return KinematicsConfig(w.step_xy, math.radians(w.step_theta_deg), w.noise_xy, math.radians(w.noise_theta_deg))

    def make_instance(self, spec: InstanceSpec) -> ObjectInstance:
        w = self.world
        fp = rectangle(w.footprint_depth * spec.scale, w.footprint_width * spec.scale)
        return ObjectInstance(spec.instance_id, w.category_id, fp, spec.height, spec.appearance_seed,
                              spec.category_blend, spec.scale)

    def train_instance(self) -> ObjectInstance:
        return self.make_instance(self.world.train_instance)

    def heldout_instances(self) -> list[ObjectInstance]:
        return [self.make_instance(s) for s in heldout_specs(self)]


def heldout_specs(cfg: RunConfig) -> list[InstanceSpec]:
    w = cfg.world
    rng = np.random.default_rng([w.heldout_seed, 99])
    out = []
    for i in range(w.heldout_count):
        out.append(InstanceSpec(
            instance_id=f"unseen_chair_{i:02d}",
            appearance_seed=int(w.heldout_seed * 1000 + i + 1),
            scale=float(rng.uniform(*w.heldout_scale_range)),
            height=float(rng.uniform(*w.heldout_height_range)),
            category_blend=w.heldout_category_blend,
        ))
    return out


def _build(tp, value):
    """Recursively turn plain JSON data into the annotated dataclass tree."""
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise InvalidArgument(f"expected an object for {tp.__name__}")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise InvalidArgument(f"unknown keys for {tp.__name__}: {sorted(unknown)}")
        return tp(**{k: _build(hints[k], v) for k, v in value.items()})
    if origin is dict:
        _, vt = typing.get_args(tp)
        return {k: _build(vt, v) for k, v in value.items()}
    if origin is list:
        (et,) = typing.get_args(tp)
        return [_build(et, v) for v in value]
    if tp is float:
        return float(value)
    if tp is int:
        if isinstance(value, bool) or int(value) != value:
            raise InvalidArgument(f"expected an integer, got {value!r}")
        return int(value)
    return value
