"""Expert demonstrations from the deadbanded sign rule and pseudo-goal datasets."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .geometry import (
    STOP,
    ActionTriple,
    InvalidArgument,
    KinematicsConfig,
    Pose2D,
    apply_action,
    pose_error_in_robot_frame,
)

DEADBAND_XY = 0.14
DEADBAND_THETA = math.radians(6.0)
TOLERANCE_XY = 0.2
TOLERANCE_THETA = math.radians(6.0)
MAX_EXPERT_STEPS = 200


class ExpertDivergence(RuntimeError):
    pass


def _deadbanded_sign(v: float, band: float) -> int:
    if abs(v) <= band:
        return 0
    return 1 if v > 0 else -1


def expert_action(error, deadband_xy: float = DEADBAND_XY,
                  deadband_theta: float = DEADBAND_THETA) -> ActionTriple:
    dx, dy, dth = error
    if not all(math.isfinite(v) for v in (dx, dy, dth)):
        raise InvalidArgument("non-finite pose error")
    return ActionTriple(
        _deadbanded_sign(dx, deadband_xy),
        _deadbanded_sign(dy, deadband_xy),
        _deadbanded_sign(dth, deadband_theta),
    )


def within_tolerance(pose: Pose2D, goal: Pose2D, tol_xy: float = TOLERANCE_XY,
                     tol_theta: float = TOLERANCE_THETA) -> bool:
    dx, dy, dth = pose_error_in_robot_frame(pose, goal)
    return math.hypot(dx, dy) <= tol_xy and abs(dth) <= tol_theta


@dataclass
class Step:
    pose: Pose2D
    obs_ref: int | None
    action: ActionTriple


@dataclass
class TrajectoryRecord:
    trajectory_id: int
    start_pose: Pose2D
    goal_pose: Pose2D
    instance_id: str
    steps: list[Step] = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def final_pose(self) -> Pose2D:
        return self.steps[-1].pose


def collect_trajectory(
    start: Pose2D,
    goal: Pose2D,
    kin: KinematicsConfig,
    rng: np.random.Generator | None,
    observe: Callable[[Pose2D], int | None] | None = None,
    trajectory_id: int = 0,
    instance_id: str = "",
    deadband_xy: float = DEADBAND_XY,
    deadband_theta: float = DEADBAND_THETA,
    max_steps: int = MAX_EXPERT_STEPS,
) -> TrajectoryRecord:
    """Drive from ``start`` to ``goal`` with the expert rule, recording every step.

    ``observe`` is called at each visited pose and returns an observation handle
    (or None when observations are not needed).
    """
    rec = TrajectoryRecord(trajectory_id, start, goal, instance_id)
    pose = start
    for _ in range(max_steps):
        ref = observe(pose) if observe is not None else None
        if within_tolerance(pose, goal):
            rec.steps.append(Step(pose, ref, STOP))
            return rec
        action = expert_action(pose_error_in_robot_frame(pose, goal), deadband_xy, deadband_theta)
        rec.steps.append(Step(pose, ref, action))
        pose = apply_action(pose, action, kin, rng)
    raise ExpertDivergence(
        f"trajectory {trajectory_id}: no convergence within {max_steps} steps "
        f"(last pose {pose}, goal {goal})"
    )


@dataclass(frozen=True)
class Sample:
    trajectory_id: int
    t: int  # 1-based step index of the current observation
    t_goal: int  # 1-based step index of the pseudo-goal, > t
    label: ActionTriple
    obs_ref: int | None
    goal_obs_ref: int | None


@dataclass
class Dataset:
    samples: list[Sample]
    trajectories: list[TrajectoryRecord]
    store: object | None = None
    config_hash: str = ""
    seed: int = 0
    samples_per_step: int = 4
    relabel: bool = True

    def __len__(self) -> int:
        return len(self.samples)

    def labels(self) -> np.ndarray:
        return np.array([s.label.class_indices() for s in self.samples], dtype=np.int64)

    def manifest(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "samples_per_step": self.samples_per_step,
            "relabel": self.relabel,
            "trajectories": len(self.trajectories),
            "samples": [
                [s.trajectory_id, s.t, s.t_goal, *s.label.as_tuple()] for s in self.samples
            ],
        }


def dataset_from_manifest(manifest: dict, trajectories: list[TrajectoryRecord], store=None) -> Dataset:
    """Rebuild a dataset from its manifest; observation refs come from the trajectories."""
    by_id = {rec.trajectory_id: rec for rec in trajectories}
    samples = []
    for row in manifest["samples"]:
        tid, t, tg, ax, ay, at = row
        rec = by_id.get(tid)
        if rec is None or not 1 <= t < tg <= rec.length:
            raise InvalidArgument(f"manifest sample {row} does not match the trajectories")
        samples.append(Sample(tid, t, tg, ActionTriple(ax, ay, at), rec.steps[t - 1].obs_ref,
                              rec.steps[tg - 1].obs_ref))
    return Dataset(samples, trajectories, store, manifest.get("config_hash", ""), manifest.get("seed", 0),
                   manifest.get("samples_per_step", 4), manifest.get("relabel", False))


def expected_sample_count(lengths: Iterable[int], k: int) -> int:
    return sum(min(k, n - t) for n in lengths for t in range(1, n))


def build_dataset(
    trajectories: list[TrajectoryRecord],
    samples_per_step: int,
    rng: np.random.Generator,
    relabel: bool = True,
    deadband_xy: float = DEADBAND_XY,
    deadband_theta: float = DEADBAND_THETA,
    store=None,
) -> Dataset:
    if not trajectories:
        raise InvalidArgument("no trajectories")
    if samples_per_step < 1:
        raise InvalidArgument("samples_per_step must be >= 1")
    samples = []
    for rec in trajectories:
        n = rec.length
        for t in range(1, n):
            choices = np.arange(t + 1, n + 1)
            k = min(samples_per_step, n - t)
            picks = np.sort(rng.choice(choices, size=k, replace=False))
            cur = rec.steps[t - 1]
            for tp in picks.tolist():
                goal = rec.steps[tp - 1]
                if relabel:
                    err = pose_error_in_robot_frame(cur.pose, goal.pose)
                    label = expert_action(err, deadband_xy, deadband_theta)
                else:
                    label = cur.action
                samples.append(Sample(rec.trajectory_id, t, tp, label, cur.obs_ref, goal.obs_ref))
    return Dataset(samples, trajectories, store, samples_per_step=samples_per_step, relabel=relabel)


def write_trajectories(path: Path, trajectories: list[TrajectoryRecord], offsets: dict[int, int] | None = None):
    """One JSON object per line: a header per trajectory, then one record per step."""
    with open(path, "w") as fh:
        for rec in trajectories:
            fh.write(json.dumps({
                "kind": "trajectory",
                "trajectory_id": rec.trajectory_id,
                "instance_id": rec.instance_id,
                "start": rec.start_pose.to_dict(),
                "goal": rec.goal_pose.to_dict(),
                "length": rec.length,
            }, sort_keys=True) + "\n")
            for i, st in enumerate(rec.steps, start=1):
                fh.write(json.dumps({
                    "kind": "step",
                    "trajectory_id": rec.trajectory_id,
                    "step": i,
                    "pose": st.pose.to_dict(),
                    "action": list(st.action.as_tuple()),
                    "obs_offset": None if offsets is None or st.obs_ref is None else offsets[st.obs_ref],
                    "obs_ref": st.obs_ref,
                }, sort_keys=True) + "\n")


def read_trajectories(path: Path) -> list[TrajectoryRecord]:
    out: list[TrajectoryRecord] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                d = json.loads(line)
                if d["kind"] == "trajectory":
                    out.append(TrajectoryRecord(
                        d["trajectory_id"], Pose2D.from_dict(d["start"]),
                        Pose2D.from_dict(d["goal"]), d["instance_id"]))
                else:
                    out[-1].steps.append(Step(
                        Pose2D.from_dict(d["pose"]), d["obs_ref"], ActionTriple(*d["action"])))
            except (KeyError, ValueError, IndexError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed trajectory record ({exc})") from exc
    return out
