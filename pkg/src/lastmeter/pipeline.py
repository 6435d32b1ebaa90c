"""End-to-end wiring: collection, dataset assembly, training, rollout suites, scoring."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .config import RunConfig, SegNoiseSpec
from .decoders import DecoderConfig, LearnedPolicy, decoder_loss_and_grad, featurize, init_decoder
from .expert import (
    Dataset,
    ExpertDivergence,
    TrajectoryRecord,
    build_dataset,
    collect_trajectory,
)
from .geometry import Pose2D, Scene, StartPoseGrid, enumerate_start_poses
from .metrics import MetricReport, aggregate, mask_com
from .rollout import AuxThresholds, RolloutConfig, RolloutLog, derive_aux_thresholds, run_suite
from .sensors import Environment, SegmentationResult, SegNoiseModel, default_rig, read_observation, write_observation
from .sim import Simulator, streams

log = logging.getLogger(__name__)

# stream tags for SeedSequence-derived generators
TAG_COLLECT = 1
TAG_DATASET = 2
TAG_GOAL = 3
TAG_INIT = 4
TAG_SHUFFLE = 5


def make_rig(cfg: RunConfig):
    s = cfg.sensor
    return default_rig((s.patch_rows, s.patch_cols), s.feature_dim, s.front_fov_deg, s.side_fov_deg,
                       s.vertical_fov_deg, s.camera_height)


def make_env(cfg: RunConfig, name: str | None = None) -> Environment:
    name = name or cfg.sensor.environment
    spec = cfg.sensor.environments[name]
    return Environment(name, spec.background_seed, spec.feature_noise)


def seg_noise(spec: SegNoiseSpec) -> SegNoiseModel:
    return SegNoiseModel(spec.dropout_prob, spec.jitter_cells, spec.flicker_prob, spec.false_positive_prob)


def goal_pose(cfg: RunConfig) -> Pose2D:
    """Goal faces the object from ``goal_distance`` in front of it (object at the origin)."""
    return Pose2D(cfg.world.goal_distance, 0.0, math.pi)


def grid_anchor(cfg: RunConfig) -> Pose2D:
    """Start grids are laid out around the goal position, rays measured from the object's front axis."""
    return Pose2D(cfg.world.goal_distance, 0.0, 0.0)


def start_poses(cfg: RunConfig, which: str = "training") -> list[Pose2D]:
    spec = cfg.world.training_grid if which == "training" else cfg.world.rollout_grid
    grid = StartPoseGrid(tuple(spec.radial_distances), tuple(spec.approach_angles), tuple(spec.start_orientations))
    return enumerate_start_poses(grid, grid_anchor(cfg), cfg.world.grid_in_object_frame)


def make_simulator(cfg: RunConfig, instance=None, env: str | None = None,
                   noise: SegNoiseSpec | None = None, noiseless: bool = False) -> Simulator:
    sim = Simulator(
        scene=Scene(instance if instance is not None else cfg.train_instance()),
        rig=make_rig(cfg),
        env=make_env(cfg, env),
        kin=cfg.kinematics(),
        seg_noise=seg_noise(noise or SegNoiseSpec()),
    )
    return sim.noiseless() if noiseless else sim


def decoder_config(cfg: RunConfig, variant: str | None = None) -> DecoderConfig:
    t = cfg.train
    return DecoderConfig(variant or t.variant, t.grid, cfg.sensor.feature_dim, 4, t.box_hidden, t.box_dim,
                         tuple(t.head_hidden), t.attention_heads, t.pool)


class ObservationStore:
    """Decoder-ready view of every recorded observation (tokens + boxes + front stats)."""

    def __init__(self, grid: int, pool: str = "mean", aux_view: int = 0):
        self.grid = grid
        self.pool = pool
        self.aux_view = aux_view
        self._tokens: list[np.ndarray] = []
        self._boxes: list[np.ndarray] = []
        self.front_area: list[float] = []
        self.front_com: list[tuple[float, float] | None] = []
        self._frozen = None

    def add_segmented(self, features: np.ndarray, segs) -> int:
        tok, box = featurize(features, segs, self.grid, self.pool)
        self._tokens.append(tok)
        self._boxes.append(box)
        front = segs[self.aux_view]
        self.front_area.append(float(front.area))
        self.front_com.append(mask_com(front.mask) if front.present else None)
        self._frozen = None
        return len(self._tokens) - 1

    def __len__(self) -> int:
        return len(self._tokens)

    def save(self, path: Path) -> None:
        tokens, boxes = self.arrays()
        com = np.array([c if c is not None else (np.nan, np.nan) for c in self.front_com], dtype=float)
        np.savez(path, tokens=tokens, boxes=boxes, front_area=np.array(self.front_area, dtype=float),
                 front_com=com.reshape(-1, 2), meta=np.array([self.grid, self.aux_view]),
                 pool=np.array(self.pool))

    @classmethod
    def load(cls, path: Path) -> "ObservationStore":
        with np.load(path) as z:
            grid, aux_view = (int(v) for v in z["meta"])
            store = cls(grid, str(z["pool"]), aux_view)
            store._frozen = (z["tokens"], z["boxes"])
            store.front_area = z["front_area"].tolist()
            store.front_com = [None if np.isnan(c).any() else (float(c[0]), float(c[1])) for c in z["front_com"]]
        store._tokens = list(store._frozen[0])
        store._boxes = list(store._frozen[1])
        return store

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        if self._frozen is None:
            self._frozen = (np.stack(self._tokens), np.stack(self._boxes))
            self._tokens = list(self._frozen[0])
            self._boxes = list(self._frozen[1])
        return self._frozen


@dataclass
class Collection:
    trajectories: list[TrajectoryRecord]
    divergences: list[tuple[int, str]] = field(default_factory=list)
    store: ObservationStore | None = None
    goal_com: tuple[float, float] | None = None
    offsets: dict[int, int] | None = None


def goal_front_com(cfg: RunConfig, instance=None):
    sim = make_simulator(cfg, instance)
    render_rng, _, _ = streams(cfg.seed, TAG_GOAL)
    obs = sim.observe(goal_pose(cfg), render_rng)
    front = obs.segs[0]
    return mask_com(front.mask) if front.present else None


def collect(cfg: RunConfig, which: str = "training", render: bool = True, noiseless: bool = False,
            sidecar: Path | None = None) -> Collection:
    """Expert trajectories from every start of the chosen grid.

    With ``render`` the observation at each visited pose is rendered, segmented
    with the collection noise model and featurised into the store; ``sidecar``
    additionally receives the raw feature grids in the binary observation format.
    """
    sim = make_simulator(cfg, noise=cfg.sensor.collection_seg_noise, noiseless=noiseless)
    goal = goal_pose(cfg)
    store = ObservationStore(cfg.train.grid, cfg.train.pool) if render else None
    offsets: dict[int, int] = {}
    fh = open(sidecar, "wb") if (render and sidecar is not None) else None
    pos = 0
    out = Collection([], store=store)
    deg = math.radians
    try:
        for tid, start in enumerate(start_poses(cfg, which)):
            r_render, r_seg, r_kin = streams(cfg.seed, TAG_COLLECT, tid)

            def observe(pose, r_render=r_render, r_seg=r_seg):
                nonlocal pos
                obs = sim.observe(pose, r_render)
                segs = sim.segment(obs, r_seg)
                idx = store.add_segmented(obs.features, segs)
                if fh is not None:
                    offsets[idx] = pos
                    pos += write_observation(fh, obs, np.stack([s.mask for s in segs]))
                return idx

            try:
                rec = collect_trajectory(
                    start, goal, sim.kin, r_kin, observe if render else None, tid,
                    sim.scene.target.instance_id, cfg.data.deadband_xy, deg(cfg.data.deadband_theta_deg),
                    cfg.data.max_expert_steps)
                out.trajectories.append(rec)
            except ExpertDivergence as exc:
                out.divergences.append((tid, str(exc)))
    finally:
        if fh is not None:
            fh.close()
    out.offsets = offsets if fh is not None else None
    if render:
        out.goal_com = goal_front_com(cfg)
    return out


def load_store(cfg: RunConfig, sidecar: Path) -> ObservationStore:
    """Rebuild decoder inputs from a binary observation sidecar."""
    store = ObservationStore(cfg.train.grid, cfg.train.pool)
    names = make_rig(cfg).names
    size = Path(sidecar).stat().st_size
    with open(sidecar, "rb") as fh:
        while fh.tell() < size:
            feats, masks = read_observation(fh)
            segs = [SegmentationResult.from_mask(n, masks[i]) for i, n in enumerate(names)]
            store.add_segmented(feats, segs)
    return store


def make_dataset(cfg: RunConfig, col: Collection) -> Dataset:
    (rng,) = streams(cfg.seed, TAG_DATASET, n=1)
    ds = build_dataset(col.trajectories, cfg.data.samples_per_step, rng, cfg.data.relabel,
                       cfg.data.deadband_xy, math.radians(cfg.data.deadband_theta_deg), store=col.store)
    ds.config_hash = cfg.hash()
    ds.seed = cfg.seed
    return ds


def thresholds_from_collection(col: Collection) -> AuxThresholds:
    finals = [rec.steps[-1].obs_ref for rec in col.trajectories]
    areas = [col.store.front_area[i] for i in finals]
    coms = [col.store.front_com[i] for i in finals]
    return derive_aux_thresholds(areas, coms, [col.goal_com] * len(coms))


def train_policy(cfg: RunConfig, dataset: Dataset, variant: str | None = None, seed: int | None = None,
                 epochs: int | None = None, progress=None):
    """Behaviour-cloning fit of one decoder; returns (decoder config, params, loss curve)."""
    dcfg = decoder_config(cfg, variant)
    seed = cfg.seed if seed is None else seed
    tokens, boxes = dataset.store.arrays()
    cur_idx = np.array([s.obs_ref for s in dataset.samples])
    goal_idx = np.array([s.goal_obs_ref for s in dataset.samples])
    labels = dataset.labels()
    (init_rng,) = streams(seed, TAG_INIT, n=1)
    params = init_decoder(dcfg, init_rng)
    shuffle_seed = int(np.random.SeedSequence([seed, TAG_SHUFFLE]).generate_state(1)[0])
    hyper = nn.TrainHyper(cfg.train.batch_size, cfg.train.epochs if epochs is None else epochs,
                          cfg.train.learning_rate, shuffle_seed, cfg.train.optimizer)

    def loss_and_grad(p, idx):
        ci, gi = cur_idx[idx], goal_idx[idx]
        box = np.concatenate([boxes[ci].reshape(len(idx), -1), boxes[gi].reshape(len(idx), -1)], axis=1)
        return decoder_loss_and_grad(p, dcfg, tokens[ci], tokens[gi], box, labels[idx])

    params, curve = nn.train_epochs(params, len(dataset), loss_and_grad, hyper, progress)
    # checkpoints hold float32; hand back exactly what a reload would give
    return dcfg, nn.round_to_f32(params), curve


def rollout_suite(cfg: RunConfig, policy_factory, instances: str = "seen", aux: bool | None = None,
                  thresholds: AuxThresholds | None = None, noise: SegNoiseSpec | None = None,
                  env: str | None = None, noiseless: bool = False, tags: dict | None = None) -> list[RolloutLog]:
    """Roll out from every start of the rollout grid.

    ``instances="unseen"`` cycles the held-out instances over the starts.
    """
    aux = cfg.rollout.aux_stop if aux is None else aux
    rcfg = rollout_config(cfg, aux, thresholds)
    noise = cfg.rollout.seg_noise if noise is None else noise
    if instances == "seen":
        pool = [cfg.train_instance()]
    elif instances == "unseen":
        pool = cfg.heldout_instances()
    else:
        raise ValueError(f"instances must be 'seen' or 'unseen', not {instances!r}")
    sims = [make_simulator(cfg, inst, env, noise, noiseless) for inst in pool]
    starts = start_poses(cfg, "rollout")
    meta = {"instances": instances, "aux_stop": aux, "environment": env or cfg.sensor.environment,
            "dropout_prob": noise.dropout_prob, **(tags or {})}
    return run_suite(policy_factory, lambda i: sims[i % len(sims)], starts, goal_pose(cfg), rcfg, cfg.seed,
                     grid_id=grid_id(cfg), tags=meta, workers=cfg.rollout.workers)


def rollout_config(cfg: RunConfig, aux: bool | None = None, thresholds: AuxThresholds | None = None) -> RolloutConfig:
    aux = cfg.rollout.aux_stop if aux is None else aux
    r = cfg.rollout
    return RolloutConfig(r.max_steps, r.consecutive_stops, aux, thresholds if aux else None, r.aux_view, r.aux_rule)


def grid_id(cfg: RunConfig) -> str:
    g = cfg.world.rollout_grid
    return f"r{len(g.radial_distances)}x{len(g.approach_angles)}x{len(g.start_orientations)}"


def score(logs: list[RolloutLog], thresholds: AuxThresholds) -> MetricReport:
    return aggregate(logs, thresholds.com_radius)


def learned_policy_factory(dcfg: DecoderConfig, params):
    return lambda: LearnedPolicy(dcfg, params)
