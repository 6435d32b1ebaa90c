"""SE(2) world model: poses, object instances, discrete-action kinematics, start grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

TWO_PI = 2.0 * math.pi


class InvalidArgument(ValueError):
    pass


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]; -pi maps to +pi."""
    if not math.isfinite(theta):
        raise InvalidArgument(f"non-finite angle: {theta!r}")
    if -math.pi < theta <= math.pi:
        return float(theta)
    wrapped = math.fmod(theta + math.pi, TWO_PI)
    if wrapped <= 0.0:
        wrapped += TWO_PI
    out = wrapped - math.pi
    # rounding can land exactly on the excluded endpoint
    return math.pi if out <= -math.pi else out


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidArgument(f"non-finite position: ({self.x}, {self.y})")
        object.__setattr__(self, "theta", normalize_angle(self.theta))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def compose(self, other: "Pose2D") -> "Pose2D":
        """Return self * other (other expressed in self's frame)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        return Pose2D(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "theta": self.theta}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose2D":
        return cls(float(d["x"]), float(d["y"]), float(d["theta"]))


@dataclass(frozen=True)
class ActionTriple:
    a_x: int
    a_y: int
    a_theta: int

    def __post_init__(self):
        for v in (self.a_x, self.a_y, self.a_theta):
            if v not in (-1, 0, 1):
                raise InvalidArgument(f"action component must be -1, 0 or +1, got {v!r}")

    @property
    def is_stop(self) -> bool:
        return self.a_x == 0 and self.a_y == 0 and self.a_theta == 0

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.a_x, self.a_y, self.a_theta)

    def class_indices(self) -> tuple[int, int, int]:
        """Map {-1, 0, +1} to class indices {0, 1, 2} per head."""
        return (self.a_x + 1, self.a_y + 1, self.a_theta + 1)

    @classmethod
    def from_indices(cls, idx) -> "ActionTriple":
        return cls(int(idx[0]) - 1, int(idx[1]) - 1, int(idx[2]) - 1)


STOP = ActionTriple(0, 0, 0)


def _polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class ObjectInstance:
    instance_id: str
    category_id: str
    footprint: tuple[tuple[float, float], ...]
    height: float
    appearance_seed: int
    category_blend: float = 0.7
    # footprint scale relative to the category template; category features are
    # evaluated in template coordinates so corresponding parts share features
    scale: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.footprint, dtype=float)
        if pts.ndim != 2 or pts.shape[0] < 3 or pts.shape[1] != 2:
            raise InvalidArgument("footprint needs >= 3 (x, y) vertices")
        area = _polygon_area(pts)
        if abs(area) <= 0.0:
            raise InvalidArgument("footprint has zero area")
        if not 0.0 <= self.category_blend <= 1.0:
            raise InvalidArgument("category_blend must lie in [0, 1]")
        if self.height <= 0:
            raise InvalidArgument("height must be positive")
        if area < 0:
            object.__setattr__(self, "footprint", tuple(map(tuple, pts[::-1].tolist())))
        else:
            object.__setattr__(self, "footprint", tuple(map(tuple, pts.tolist())))
        if not _is_convex(np.asarray(self.footprint)):
            raise InvalidArgument("footprint must be convex")

    @property
    def polygon(self) -> np.ndarray:
        return np.asarray(self.footprint, dtype=float)

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "category_id": self.category_id,
            "footprint": [list(p) for p in self.footprint],
            "height": self.height,
            "appearance_seed": self.appearance_seed,
            "category_blend": self.category_blend,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectInstance":
        return cls(
            instance_id=d["instance_id"],
            category_id=d["category_id"],
            footprint=tuple(tuple(map(float, p)) for p in d["footprint"]),
            height=float(d["height"]),
            appearance_seed=int(d["appearance_seed"]),
            category_blend=float(d.get("category_blend", 0.7)),
            scale=float(d.get("scale", 1.0)),
        )


def _is_convex(pts: np.ndarray) -> bool:
    d1 = np.roll(pts, -1, axis=0) - pts
    d2 = np.roll(d1, -1, axis=0)
    cross = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    return bool(np.all(cross >= -1e-12))


def rectangle(depth: float, width: float) -> tuple[tuple[float, float], ...]:
    """Axis-aligned rectangle centred on the origin; depth along x, width along y."""
    hx, hy = depth / 2.0, width / 2.0
    return ((-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy))


@dataclass(frozen=True)
class KinematicsConfig:
    step_xy: float = 0.05
    step_theta: float = math.radians(5.0)
    noise_xy: float = 0.005
    noise_theta: float = math.radians(0.5)

    def __post_init__(self):
        if self.step_xy <= 0 or self.step_theta <= 0:
            raise InvalidArgument("step sizes must be positive")
        if self.noise_xy < 0 or self.noise_theta < 0:
            raise InvalidArgument("noise std-devs must be non-negative")

    def noiseless(self) -> "KinematicsConfig":
        return KinematicsConfig(self.step_xy, self.step_theta, 0.0, 0.0)


def pose_error_in_robot_frame(robot: Pose2D, goal: Pose2D) -> tuple[float, float, float]:
    """Goal position in the robot body frame, plus wrapped heading difference."""
    wx, wy = goal.x - robot.x, goal.y - robot.y
    c, s = math.cos(robot.theta), math.sin(robot.theta)
    dx = c * wx + s * wy
    dy = -s * wx + c * wy
    return dx, dy, normalize_angle(goal.theta - robot.theta)


def apply_action(
    pose: Pose2D,
    action: ActionTriple,
    cfg: KinematicsConfig,
    rng: np.random.Generator | None = None,
) -> Pose2D:
    ex = ey = et = 0.0
    if cfg.noise_xy > 0 or cfg.noise_theta > 0:
        if rng is None:
            raise InvalidArgument("noisy kinematics need an rng")
        ex, ey, et = rng.normal(0.0, 1.0, size=3) * (cfg.noise_xy, cfg.noise_xy, cfg.noise_theta)
    bx = action.a_x * cfg.step_xy + ex
    by = action.a_y * cfg.step_xy + ey
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    return Pose2D(
        pose.x + c * bx - s * by,
        pose.y + s * bx + c * by,
        pose.theta + action.a_theta * cfg.step_theta + et,
    )


@dataclass(frozen=True)
class StartPoseGrid:
    radial_distances: tuple[float, ...]
    approach_angles: tuple[float, ...]  # degrees
    start_orientations: tuple[float, ...]  # degrees

    def __post_init__(self):
        for name in ("radial_distances", "approach_angles", "start_orientations"):
            vals = tuple(float(v) for v in getattr(self, name))
            if not all(math.isfinite(v) for v in vals):
                raise InvalidArgument(f"{name} must be finite")
            object.__setattr__(self, name, vals)

    def __len__(self) -> int:
        return len(self.radial_distances) * len(self.approach_angles) * len(self.start_orientations)

    def to_dict(self) -> dict:
        return {
            "radial_distances": list(self.radial_distances),
            "approach_angles": list(self.approach_angles),
            "start_orientations": list(self.start_orientations),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StartPoseGrid":
        return cls(tuple(d["radial_distances"]), tuple(d["approach_angles"]), tuple(d["start_orientations"]))


def _frange(start: float, stop: float, step: float) -> tuple[float, ...]:
    n = int(round((stop - start) / step))
    return tuple(start + i * step for i in range(n + 1))


TRAINING_GRID = StartPoseGrid(
    radial_distances=(0.3, 0.45, 0.6, 0.9, 1.2),
    approach_angles=_frange(-90.0, 90.0, 15.0),
    start_orientations=_frange(-150.0, 150.0, 30.0),
)

ROLLOUT_GRID = StartPoseGrid(
    radial_distances=(1.0,),
    approach_angles=(80.0, 50.0, 25.0, 0.0, -25.0, -50.0, -80.0),
    start_orientations=(135.0, 90.0, 45.0, 0.0, -45.0, -90.0, -135.0),
)


def enumerate_start_poses(grid: StartPoseGrid, anchor: Pose2D, object_frame: bool = True) -> list[Pose2D]:
    """Start poses around ``anchor``, distance-major, then approach angle, then orientation.

    Each approach ray leaves the anchor at ``approach_angle`` measured from the
    anchor heading (or from world +x when ``object_frame`` is False). The start
    heading looks back along the ray, rotated by the start orientation.
    """
    if len(grid) == 0:
        raise InvalidArgument("empty start-pose grid")
    base = anchor.theta if object_frame else 0.0
    poses = []
    for d in grid.radial_distances:
        for alpha in grid.approach_angles:
            ray = base + math.radians(alpha)
            px = anchor.x + d * math.cos(ray)
            py = anchor.y + d * math.sin(ray)
            facing = ray + math.pi
            for o in grid.start_orientations:
                poses.append(Pose2D(px, py, facing + math.radians(o)))
    return poses


@dataclass
class Scene:
    """Target object placement plus optional distractors, all in world coordinates."""

    target: ObjectInstance
    target_pose: Pose2D = field(default_factory=lambda: Pose2D(0.0, 0.0, 0.0))
    distractors: list[tuple[ObjectInstance, Pose2D]] = field(default_factory=list)

    def objects(self) -> list[tuple[ObjectInstance, Pose2D]]:
        return [(self.target, self.target_pose), *self.distractors]
