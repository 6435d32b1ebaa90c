"""Bundles scene, camera rig, environment, kinematics and segmentation noise."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import ActionTriple, KinematicsConfig, Pose2D, Scene, apply_action
from .sensors import CameraRig, Environment, ObservationSet, SegNoiseModel, render_observation, segment


@dataclass
class Simulator:
    scene: Scene
    rig: CameraRig
    env: Environment = field(default_factory=Environment)
    kin: KinematicsConfig = field(default_factory=KinematicsConfig)
    seg_noise: SegNoiseModel = field(default_factory=SegNoiseModel)

    def observe(self, pose: Pose2D, rng: np.random.Generator | None) -> ObservationSet:
        return render_observation(pose, self.scene, self.rig, self.env, rng)

    def segment(self, obs: ObservationSet, rng: np.random.Generator):
        return segment(obs, self.scene.target.instance_id, self.seg_noise, rng)

    def step(self, pose: Pose2D, action: ActionTriple, rng: np.random.Generator | None) -> Pose2D:
        return apply_action(pose, action, self.kin, rng)

    def with_target(self, instance) -> "Simulator":
        return replace(self, scene=replace(self.scene, target=instance))

    def noiseless(self) -> "Simulator":
        return replace(self, env=replace(self.env, feature_noise=0.0), kin=self.kin.noiseless(),
                       seg_noise=SegNoiseModel())


def streams(seed: int, *tags: int, n: int = 3) -> list[np.random.Generator]:
    """Independent generators keyed by (seed, tags...)."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *tags])
    return [np.random.default_rng(s) for s in ss.spawn(n)]
