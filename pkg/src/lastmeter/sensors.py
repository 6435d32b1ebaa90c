"""Synthetic per-view feature grids and oracle/noisy segmentation.

Features are produced directly at patch resolution. Every patch owns one ray
through its centre; a ray that hits the target prism picks up a feature vector
from seeded random-Fourier fields defined over the object's surface, so the
same surface point looks the same from any robot pose.
"""

from __future__ import annotations

import functools
import hashlib
import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .geometry import InvalidArgument, ObjectInstance, Pose2D, Scene

VIEW_NAMES = ("front", "right", "back", "left")
_YAW = {"front": 0.0, "right": -math.pi / 2, "back": math.pi, "left": math.pi / 2}

OBJECT_FEATURE_NORM = 1.5
BACKGROUND_NORM = 1.0
TEMPLATE_HEIGHT = 0.9

OBS_MAGIC = b"LMOB1"


class DegenerateGeometry(ValueError):
    pass


@dataclass(frozen=True)
class ViewSpec:
    name: str
    yaw_offset: float
    horizontal_fov: float
    patch_grid: tuple[int, int] = (16, 16)
    feature_dim: int = 32


@dataclass(frozen=True)
class CameraRig:
    views: tuple[ViewSpec, ...]
    vertical_fov: float = math.radians(90.0)
    camera_height: float = 0.5

    def __post_init__(self):
        if len(self.views) != 4:
            raise InvalidArgument("rig needs exactly four views")
        yaws = sorted(round(v.yaw_offset, 9) for v in self.views)
        if yaws != sorted(round(y, 9) for y in _YAW.values()):
            raise InvalidArgument("view yaw offsets must be {0, -pi/2, pi, +pi/2}")
        shapes = {(v.patch_grid, v.feature_dim) for v in self.views}
        if len(shapes) != 1:
            raise InvalidArgument("all views must share patch grid and feature dim")
        (h, w), d = next(iter(shapes))
        if min(h, w, d) < 1:
            raise InvalidArgument("patch grid and feature dim must be >= 1")
        by_yaw = sorted(self.views, key=lambda v: v.yaw_offset)
        for a, b in zip(by_yaw, by_yaw[1:] + by_yaw[:1]):
            if (a.horizontal_fov + b.horizontal_fov) / 2.0 < math.pi / 2 - 1e-12:
                raise InvalidArgument(f"gap between {a.name} and {b.name} views")

    @property
    def shape(self) -> tuple[int, int, int]:
        v = self.views[0]
        return v.patch_grid[0], v.patch_grid[1], v.feature_dim

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(v.name for v in self.views)

    def index(self, name: str) -> int:
        return self.names.index(name)


def default_rig(
    patches: tuple[int, int] = (16, 16),
    feature_dim: int = 32,
    front_fov_deg: float = 120.0,
    side_fov_deg: float = 100.0,
    vertical_fov_deg: float = 90.0,
    camera_height: float = 0.5,
) -> CameraRig:
    views = tuple(
        ViewSpec(
            name,
            _YAW[name],
            math.radians(front_fov_deg if name == "front" else side_fov_deg),
            tuple(patches),
            feature_dim,
        )
        for name in VIEW_NAMES
    )
    return CameraRig(views, math.radians(vertical_fov_deg), camera_height)


@dataclass(frozen=True)
class FeatureGrid:
    view: str
    data: np.ndarray  # (H_p, W_p, D)


@dataclass(frozen=True)
class SegmentationResult:
    view: str
    mask: np.ndarray  # (H_p, W_p) bool
    bbox: tuple[float, float, float, float]  # (u_min, v_min, u_max, v_max) in [0, 1]
    present: bool

    @classmethod
    def from_mask(cls, view: str, mask: np.ndarray) -> "SegmentationResult":
        mask = np.asarray(mask, dtype=bool)
        rows = np.flatnonzero(mask.any(axis=1))
        if rows.size == 0:
            return cls(view, mask, (0.0, 0.0, 0.0, 0.0), False)
        cols = np.flatnonzero(mask.any(axis=0))
        h, w = mask.shape
        bbox = (cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)
        return cls(view, mask, tuple(float(b) for b in bbox), True)

    @property
    def area(self) -> float:
        u0, v0, u1, v1 = self.bbox
        return (u1 - u0) * (v1 - v0)

    def cell_bounds(self) -> tuple[int, int, int, int]:
        """Inclusive-exclusive (row0, row1, col0, col1) of the bbox in cells."""
        h, w = self.mask.shape
        u0, v0, u1, v1 = self.bbox
        return (int(round(v0 * h)), int(round(v1 * h)), int(round(u0 * w)), int(round(u1 * w)))


@dataclass(frozen=True)
class SegNoiseModel:
    dropout_prob: float = 0.0
    jitter_cells: int = 0
    flicker_prob: float = 0.0
    false_positive_prob: float = 0.0

    def __post_init__(self):
        for p in (self.dropout_prob, self.flicker_prob, self.false_positive_prob):
            if not 0.0 <= p <= 1.0:
                raise InvalidArgument("probabilities must lie in [0, 1]")
        if self.jitter_cells < 0:
            raise InvalidArgument("jitter_cells must be >= 0")


@dataclass(frozen=True)
class Environment:
    """Background appearance and feature noise level (lighting stand-in)."""

    name: str = "lab"
    background_seed: int = 11
    feature_noise: float = 0.05


@dataclass
class ObservationSet:
    view_names: tuple[str, ...]
    features: np.ndarray  # (V, H, W, D) float32
    segs: tuple[SegmentationResult, ...]  # oracle target segmentation, one per view
    true_pose: Pose2D
    target_id: str
    object_masks: dict[str, np.ndarray] = field(default_factory=dict)  # id -> (V, H, W) bool

    @property
    def grids(self) -> list[FeatureGrid]:
        return [FeatureGrid(n, self.features[i]) for i, n in enumerate(self.view_names)]


def _seed_from(*parts) -> int:
    h = hashlib.sha256("/".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little")


class FourierField:
    """Smooth seeded vector field R^3 -> R^D built from random Fourier features."""

    def __init__(self, seed: int, dim: int, n_freq: int = 48, length_scale: float = 0.15):
        rng = np.random.default_rng(seed)
        self.omega = rng.normal(0.0, 1.0 / length_scale, size=(n_freq, 3))
        self.phase = rng.uniform(0.0, 2 * math.pi, size=n_freq)
        self.weight = rng.normal(0.0, 1.0, size=(dim, n_freq)) * math.sqrt(2.0 / n_freq)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.sin(points @ self.omega.T + self.phase) @ self.weight.T


@functools.lru_cache(maxsize=256)
def category_field(category_id: str, dim: int) -> FourierField:
    return FourierField(_seed_from("category", category_id), dim)


@functools.lru_cache(maxsize=256)
def instance_field(appearance_seed: int, dim: int) -> FourierField:
    return FourierField(_seed_from("instance", appearance_seed), dim)


@functools.lru_cache(maxsize=64)
def background_vector(seed: int, dim: int) -> np.ndarray:
    v = np.random.default_rng(_seed_from("background", seed)).normal(size=dim)
    return BACKGROUND_NORM * v / np.linalg.norm(v)


def surface_features(instance: ObjectInstance, points: np.ndarray, dim: int) -> np.ndarray:
    """Object feature vectors at object-frame surface points (N, 3)."""
    template = points / np.array([instance.scale, instance.scale, instance.height / TEMPLATE_HEIGHT])
    b = instance.category_blend
    raw = b * category_field(instance.category_id, dim)(template)
    if b < 1.0:
        raw = raw + (1.0 - b) * instance_field(instance.appearance_seed, dim)(template)
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    return OBJECT_FEATURE_NORM * raw / np.maximum(norm, 1e-12)


@functools.lru_cache(maxsize=32)
def _ray_table(view: ViewSpec, vertical_fov: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch lateral and vertical slopes of the pinhole ray (forward = 1)."""
    h, w = view.patch_grid
    x_img = 2.0 * (np.arange(w) + 0.5) / w - 1.0
    y_img = 2.0 * (np.arange(h) + 0.5) / h - 1.0
    lateral = -x_img * math.tan(view.horizontal_fov / 2.0)
    up = -y_img * math.tan(vertical_fov / 2.0)
    lat, upg = np.meshgrid(lateral, up)
    return lat.ravel(), upg.ravel()


def _cast(origin: np.ndarray, dirs: np.ndarray, up: np.ndarray, cam_h: float,
          instance: ObjectInstance, pose: Pose2D) -> tuple[np.ndarray, np.ndarray]:
    """Ray parameter of the first valid hit on an extruded footprint (inf if none) and hit z."""
    c, s = math.cos(pose.theta), math.sin(pose.theta)
    poly = instance.polygon @ np.array([[c, s], [-s, c]]) + pose.xy
    p = poly
    e = np.roll(poly, -1, axis=0) - poly
    po = p - origin  # (E, 2)
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]  # (R, E)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (po[None, :, 0] * e[None, :, 1] - po[None, :, 1] * e[None, :, 0]) / denom
        u = (po[None, :, 0] * dirs[:, 1:2] - po[None, :, 1] * dirs[:, 0:1]) / denom
    ok = (np.abs(denom) > 1e-15) & (t > 1e-9) & (u >= 0.0) & (u <= 1.0)
    t = np.where(ok, t, np.inf).min(axis=1)
    z = cam_h + t * up
    valid = np.isfinite(t) & (z >= 0.0) & (z <= instance.height)
    return np.where(valid, t, np.inf), z


def _check_not_centred(robot: Pose2D, scene_objects) -> None:
    for inst, pose in scene_objects:
        c, s = math.cos(pose.theta), math.sin(pose.theta)
        centroid = pose.xy + np.array([[c, -s], [s, c]]) @ inst.polygon.mean(axis=0)
        if np.hypot(*(robot.xy - centroid)) < 1e-9:
            raise DegenerateGeometry(f"robot sits at the centroid of {inst.instance_id}")


def _view_rays(robot: Pose2D, view: ViewSpec, rig: CameraRig) -> tuple[np.ndarray, np.ndarray]:
    lat, up = _ray_table(view, rig.vertical_fov)
    a = robot.theta + view.yaw_offset
    ca, sa = math.cos(a), math.sin(a)
    dirs = np.stack([ca - lat * sa, sa + lat * ca], axis=1)
    return dirs, up


def project_object(robot: Pose2D, instance: ObjectInstance, object_pose: Pose2D,
                   view: ViewSpec, rig: CameraRig) -> SegmentationResult:
    """Oracle silhouette of one object in one view (no occluders).

    A cell is set when the pinhole ray through its centre meets the object's
    extruded footprint between the floor and the object's height; for a convex
    prism that is the same as the cell centre falling inside the projected
    silhouette.
    """
    _check_not_centred(robot, [(instance, object_pose)])
    dirs, up = _view_rays(robot, view, rig)
    t, _ = _cast(robot.xy, dirs, up, rig.camera_height, instance, object_pose)
    mask = np.isfinite(t).reshape(view.patch_grid)
    return SegmentationResult.from_mask(view.name, mask)


def render_observation(robot: Pose2D, scene: Scene, rig: CameraRig, env: Environment,
                       rng: np.random.Generator | None) -> ObservationSet:
    """Render feature grids for every view plus oracle masks for every object."""
    objects = scene.objects()
    _check_not_centred(robot, objects)
    h, w, d = rig.shape
    nviews = len(rig.views)
    bg = background_vector(env.background_seed, d)
    feats = np.empty((nviews, h * w, d))
    masks = {inst.instance_id: np.zeros((nviews, h * w), dtype=bool) for inst, _ in objects}
    for vi, view in enumerate(rig.views):
        dirs, up = _view_rays(robot, view, rig)
        best_t = np.full(h * w, np.inf)
        best_obj = np.full(h * w, -1)
        best_z = np.zeros(h * w)
        for oi, (inst, pose) in enumerate(objects):
            t, z = _cast(robot.xy, dirs, up, rig.camera_height, inst, pose)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_obj = np.where(closer, oi, best_obj)
            best_z = np.where(closer, z, best_z)
        feats[vi] = bg
        for oi, (inst, pose) in enumerate(objects):
            hit = best_obj == oi
            if not hit.any():
                continue
            masks[inst.instance_id][vi] = hit
            world = robot.xy + best_t[hit, None] * dirs[hit]
            c, s = math.cos(pose.theta), math.sin(pose.theta)
            local = (world - pose.xy) @ np.array([[c, -s], [s, c]])
            pts = np.column_stack([local, best_z[hit]])
            feats[vi, hit] = surface_features(inst, pts, d)
    if env.feature_noise > 0:
        if rng is None:
            raise InvalidArgument("noisy rendering needs an rng")
        feats = feats + rng.normal(0.0, env.feature_noise, size=feats.shape)
    masks = {k: m.reshape(nviews, h, w) for k, m in masks.items()}
    target = masks[scene.target.instance_id]
    segs = tuple(SegmentationResult.from_mask(v.name, target[i]) for i, v in enumerate(rig.views))
    return ObservationSet(
        view_names=rig.names,
        features=feats.reshape(nviews, h, w, d).astype(np.float32),
        segs=segs,
        true_pose=robot,
        target_id=scene.target.instance_id,
        object_masks=masks,
    )


def _jitter(mask: np.ndarray, radius: int, dilate: bool) -> np.ndarray:
    if radius <= 0:
        return mask
    if dilate:
        return ndimage.binary_dilation(mask, iterations=radius)
    return ndimage.binary_erosion(mask, iterations=radius)


def segment(obs: ObservationSet, target_id: str, noise: SegNoiseModel,
            rng: np.random.Generator) -> tuple[SegmentationResult, ...]:
    """Oracle target segmentation corrupted by ``noise``.

    The same random draws are consumed whatever the noise levels, so runs that
    differ only in noise settings share their random stream.
    """
    if target_id not in obs.object_masks:
        raise InvalidArgument(f"unknown target id {target_id!r}")
    oracle = obs.object_masks[target_id]
    others = sorted(k for k in obs.object_masks if k != target_id)
    nviews, h, w = oracle.shape
    out = []
    for vi, name in enumerate(obs.view_names):
        u_drop, u_fp, u_pick, u_op, u_rad = rng.random(5)
        radius = min(int(u_rad * (noise.jitter_cells + 1)), noise.jitter_cells)
        flick = rng.random((h, w)) < noise.flicker_prob
        mask = oracle[vi]
        if others and u_fp < noise.false_positive_prob:
            mask = obs.object_masks[others[int(u_pick * len(others))]][vi]
        mask = _jitter(mask, radius, dilate=u_op < 0.5)
        mask = mask ^ flick
        if u_drop < noise.dropout_prob:
            mask = np.zeros_like(mask)
        out.append(SegmentationResult.from_mask(name, mask))
    return tuple(out)


def write_observation(fh: io.BufferedIOBase, obs: ObservationSet, masks: np.ndarray | None = None) -> int:
    """Append one observation record; returns bytes written.

    ``masks`` (V, H, W) overrides the oracle target masks, e.g. to store the
    segmentation actually used downstream.
    """
    v, h, w, d = obs.features.shape
    target = obs.object_masks[obs.target_id] if masks is None else np.asarray(masks, dtype=bool)
    payload = b"".join((
        OBS_MAGIC,
        struct.pack("<4I", h, w, d, v),
        np.ascontiguousarray(obs.features, dtype="<f4").tobytes(),
        np.packbits(target.astype(np.uint8).ravel()).tobytes(),
    ))
    fh.write(payload)
    return len(payload)


def read_observation(fh: io.BufferedIOBase) -> tuple[np.ndarray, np.ndarray]:
    """Read one record; returns (features (V,H,W,D) float32, target masks (V,H,W) bool)."""
    magic = fh.read(len(OBS_MAGIC))
    if magic != OBS_MAGIC:
        raise ValueError(f"bad observation magic {magic!r}")
    h, w, d, v = struct.unpack("<4I", fh.read(16))
    n = v * h * w * d
    feats = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(v, h, w, d).astype(np.float32)
    nbits = v * h * w
    bits = np.frombuffer(fh.read((nbits + 7) // 8), dtype=np.uint8)
    masks = np.unpackbits(bits)[:nbits].reshape(v, h, w).astype(bool)
    return feats, masks
