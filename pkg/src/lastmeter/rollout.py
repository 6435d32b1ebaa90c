"""Policy rollouts with two-consecutive-stop termination and the auxiliary stop."""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .decoders import PolicyOutput, select_action_indices
from .expert import TOLERANCE_THETA, TOLERANCE_XY, expert_action, within_tolerance
from .geometry import ActionTriple, InvalidArgument, KinematicsConfig, Pose2D, apply_action, pose_error_in_robot_frame
from .metrics import d_com, mask_com
from .sim import Simulator, streams


class Termination(str, Enum):
    STOP_ACTION = "StopAction"
    AUX_STOP = "AuxStop"
    MAX_STEPS = "MaxSteps"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AuxThresholds:
    bbox_area_lo: float
    bbox_area_hi: float
    com_radius: float

    def to_dict(self) -> dict:
        return {"bbox_area_lo": self.bbox_area_lo, "bbox_area_hi": self.bbox_area_hi,
                "com_radius": self.com_radius}


AUX_RULES = ("stop_gated", "conjunction")


@dataclass(frozen=True)
class RolloutConfig:
    """Termination settings.

    ``aux_rule="conjunction"`` fires the auxiliary stop whenever the front-view
    bbox area lies in the band and the mask CoM is within ``com_radius`` of the
    goal CoM. ``"stop_gated"`` (default) additionally requires the policy to
    have emitted a stop on that step, so the rule only converts a single stop
    that the thresholds corroborate and never cuts a rotation short.
    """

    max_steps: int = 200
    consecutive_stops: int = 2
    aux_stop: bool = False
    aux: AuxThresholds | None = None
    aux_view: str = "front"
    aux_rule: str = "stop_gated"

    def __post_init__(self):
        if self.max_steps < 1:
            raise InvalidArgument("max_steps must be >= 1")
        if self.aux_rule not in AUX_RULES:
            raise InvalidArgument(f"aux_rule must be one of {AUX_RULES}")
        if self.aux_stop:
            if self.aux is None:
                raise InvalidArgument("aux stop enabled without thresholds")
            if min(self.aux.bbox_area_lo, self.aux.bbox_area_hi) <= 0 or self.aux.com_radius < 0:
                raise InvalidArgument("aux thresholds must be positive")


@dataclass
class RolloutStep:
    pose: Pose2D
    action: ActionTriple
    logits: list[float]
    seg: dict


@dataclass
class RolloutLog:
    start_index: int
    start_pose: Pose2D
    goal_pose: Pose2D
    instance_id: str
    steps: list[RolloutStep]
    final_pose: Pose2D
    termination: Termination
    wall_steps: int
    final_com: tuple[float, float] | None
    goal_com: tuple[float, float] | None
    grid_id: str = ""
    tags: dict = field(default_factory=dict)


def _front_com(segs, view: str):
    for s in segs:
        if s.view == view:
            return mask_com(s.mask) if s.present else None
    raise ConfigurationError(f"no {view!r} view in segmentation")


def _aux_triggered(segs, goal_com, cfg: RolloutConfig, action: ActionTriple) -> bool:
    th = cfg.aux
    if cfg.aux_rule == "stop_gated" and not action.is_stop:
        return False
    seg = next(s for s in segs if s.view == cfg.aux_view)
    if not seg.present or goal_com is None:
        return False
    if not th.bbox_area_lo <= seg.area <= th.bbox_area_hi:
        return False
    return d_com(goal_com, mask_com(seg.mask)) <= th.com_radius


def run_rollout(policy, sim: Simulator, start: Pose2D, goal_pose: Pose2D, cfg: RolloutConfig,
                seed: int, start_index: int = 0, goal_obs=None, goal_segs=None,
                grid_id: str = "", tags: dict | None = None) -> RolloutLog:
    """Run one policy episode from ``start``.

    The goal observation is rendered at ``goal_pose`` unless supplied. Separate
    random streams drive rendering, segmentation and actuation, so toggling the
    auxiliary stop only ever truncates an otherwise identical episode.
    """
    r_render, r_seg, r_kin = streams(seed, 7, start_index)
    if goal_obs is None:
        g_render, g_seg, _ = streams(seed, 8, start_index)
        goal_obs = sim.observe(goal_pose, g_render)
        goal_segs = sim.segment(goal_obs, g_seg)
    if goal_obs.features.shape[1:] != tuple(sim.rig.shape):
        raise ConfigurationError("goal observation does not match the camera rig")
    policy.reset(goal_obs, goal_segs, goal_pose)
    goal_com = _front_com(goal_segs, cfg.aux_view)

    pose = start
    steps: list[RolloutStep] = []
    stops = 0
    termination = Termination.MAX_STEPS
    final_segs = None
    for _ in range(cfg.max_steps):
        obs = sim.observe(pose, r_render)
        segs = sim.segment(obs, r_seg)
        try:
            out: PolicyOutput = policy(obs, segs)
        except InvalidArgument as exc:
            raise ConfigurationError(str(exc)) from exc
        action = ActionTriple.from_indices(select_action_indices(out.logits))
        front = out.aux_stats.get(cfg.aux_view, {})
        steps.append(RolloutStep(pose, action, [float(v) for v in out.logits], front))
        stops = stops + 1 if action.is_stop else 0
        if stops >= cfg.consecutive_stops:
            termination, final_segs = Termination.STOP_ACTION, segs
            break
        if cfg.aux_stop and _aux_triggered(segs, goal_com, cfg, action):
            termination, final_segs = Termination.AUX_STOP, segs
            break
        pose = sim.step(pose, action, r_kin)
    if final_segs is None:
        final_segs = sim.segment(sim.observe(pose, r_render), r_seg)
    return RolloutLog(
        start_index=start_index,
        start_pose=start,
        goal_pose=goal_pose,
        instance_id=sim.scene.target.instance_id,
        steps=steps,
        final_pose=pose,
        termination=termination,
        wall_steps=len(steps),
        final_com=_front_com(final_segs, cfg.aux_view),
        goal_com=goal_com,
        grid_id=grid_id,
        tags=dict(tags or {}),
    )


def replay_final_pose(log: RolloutLog, kin: KinematicsConfig) -> Pose2D:
    """Re-apply the logged actions without noise (stop steps do not move)."""
    pose = log.start_pose
    moving = log.steps if log.termination == Termination.MAX_STEPS else log.steps[:-1]
    for st in moving:
        pose = apply_action(pose, st.action, kin.noiseless())
    return pose


def derive_aux_thresholds(final_areas, final_coms, goal_coms) -> AuxThresholds:
    """Bbox-area band (5th-95th percentile) and CoM radius (95th percentile).

    ``final_coms``/``goal_coms`` are paired per trajectory; pairs with a missing
    CoM are skipped.
    """
    areas = np.asarray(list(final_areas), dtype=float)
    if areas.size == 0:
        raise InvalidArgument("no trajectories to derive thresholds from")
    dists = [d_com(g, f) for f, g in zip(final_coms, goal_coms) if f is not None and g is not None]
    if not dists:
        raise InvalidArgument("no final frames with a visible target")
    lo, hi = np.percentile(areas, [5.0, 95.0])
    return AuxThresholds(float(lo), float(hi), float(np.percentile(dists, 95.0)))


class StubPolicy:
    """Emits the same action every step."""

    def __init__(self, action: ActionTriple, name: str = "stub"):
        self.action = action
        self.name = name

    def reset(self, goal_obs, goal_segs, goal_pose=None):
        pass

    def __call__(self, obs, segs) -> PolicyOutput:
        logits = np.full(9, -10.0)
        for head, level in enumerate(self.action.as_tuple()):
            logits[3 * head + level + 1] = 10.0
        return PolicyOutput(logits, {s.view: {"present": bool(s.present), "area": float(s.area)} for s in segs})


class ExpertOraclePolicy:
    """Expert rule on ground-truth pose; stops once inside the collection tolerance."""

    name = "ExpertOracle"

    def __init__(self, tol_xy: float = TOLERANCE_XY, tol_theta: float = TOLERANCE_THETA):
        self.tol_xy = tol_xy
        self.tol_theta = tol_theta
        self.goal_pose = None

    def reset(self, goal_obs, goal_segs, goal_pose=None):
        if goal_pose is None:
            raise InvalidArgument("expert oracle needs the goal pose")
        self.goal_pose = goal_pose

    def __call__(self, obs, segs) -> PolicyOutput:
        pose = obs.true_pose
        if within_tolerance(pose, self.goal_pose, self.tol_xy, self.tol_theta):
            action = ActionTriple(0, 0, 0)
        else:
            action = expert_action(pose_error_in_robot_frame(pose, self.goal_pose))
        return StubPolicy(action)(obs, segs)


def run_suite(make_policy, make_sim, starts, goal_pose: Pose2D, cfg: RolloutConfig, seed: int,
              grid_id: str = "", tags: dict | None = None, workers: int = 1) -> list[RolloutLog]:
    """Roll out from every start; ``make_sim(i)`` picks the world for start ``i``.

    Results come back in start order regardless of ``workers``.
    """
    def one(i):
        return run_rollout(make_policy(), make_sim(i), starts[i], goal_pose, cfg, seed,
                           start_index=i, grid_id=grid_id, tags=tags)

    if workers <= 1:
        return [one(i) for i in range(len(starts))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(len(starts))))


def _pose(d):
    return Pose2D.from_dict(d)


def write_logs(path: Path, logs: list[RolloutLog], header: dict | None = None) -> None:
    """Suite header, then per rollout a summary record followed by one record per step."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"kind": "suite", **(header or {}), "rollouts": len(logs)}, sort_keys=True) + "\n")
        for log in logs:
            fh.write(json.dumps({
                "kind": "rollout",
                "start_index": log.start_index,
                "start": log.start_pose.to_dict(),
                "goal": log.goal_pose.to_dict(),
                "instance_id": log.instance_id,
                "final": log.final_pose.to_dict(),
                "termination": log.termination.value,
                "wall_steps": log.wall_steps,
                "final_com": None if log.final_com is None else list(log.final_com),
                "goal_com": None if log.goal_com is None else list(log.goal_com),
                "grid_id": log.grid_id,
                "tags": log.tags,
            }, sort_keys=True) + "\n")
            for i, st in enumerate(log.steps, start=1):
                fh.write(json.dumps({
                    "kind": "step", "start_index": log.start_index, "step": i,
                    "pose": st.pose.to_dict(), "action": list(st.action.as_tuple()),
                    "logits": [round(v, 6) for v in st.logits], "seg": st.seg,
                }, sort_keys=True) + "\n")


def read_logs(path: Path) -> tuple[dict, list[RolloutLog]]:
    header: dict = {}
    logs: list[RolloutLog] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                d = json.loads(line)
                kind = d["kind"]
                if kind == "suite":
                    header = d
                elif kind == "rollout":
                    logs.append(RolloutLog(
                        d["start_index"], _pose(d["start"]), _pose(d["goal"]), d["instance_id"], [],
                        _pose(d["final"]), Termination(d["termination"]), int(d["wall_steps"]),
                        None if d["final_com"] is None else tuple(d["final_com"]),
                        None if d["goal_com"] is None else tuple(d["goal_com"]),
                        d.get("grid_id", ""), d.get("tags", {})))
                elif kind == "step":
                    if not logs or logs[-1].start_index != d["start_index"]:
                        raise ValueError("step record outside its rollout")
                    logs[-1].steps.append(RolloutStep(
                        _pose(d["pose"]), ActionTriple(*d["action"]), d["logits"], d["seg"]))
                else:
                    raise ValueError(f"unknown record kind {kind!r}")
            except (KeyError, ValueError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed rollout record ({exc})") from exc
    for log in logs:
        if log.wall_steps != len(log.steps):
            raise ValueError(f"{path}: rollout {log.start_index} step count mismatch")
    return header, logs


def termination_consistent(log: RolloutLog, cfg: RolloutConfig) -> bool:
    """Check the recorded termination cause against the step record."""
    if log.termination == Termination.MAX_STEPS:
        return log.wall_steps == cfg.max_steps
    if log.termination == Termination.STOP_ACTION:
        tail = log.steps[-cfg.consecutive_stops:]
        return len(tail) == cfg.consecutive_stops and all(s.action.is_stop for s in tail)
    if not cfg.aux_stop or log.wall_steps > cfg.max_steps or not log.steps:
        return False
    return cfg.aux_rule != "stop_gated" or log.steps[-1].action.is_stop
