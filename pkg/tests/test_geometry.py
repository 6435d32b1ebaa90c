import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lastmeter.geometry import (
    ROLLOUT_GRID,
    STOP,
    TRAINING_GRID,
    ActionTriple,
    InvalidArgument,
    KinematicsConfig,
    ObjectInstance,
    Pose2D,
    StartPoseGrid,
    apply_action,
    enumerate_start_poses,
    normalize_angle,
    pose_error_in_robot_frame,
    rectangle,
)

finite = st.floats(min_value=-1e4, max_value=1e4, allow_nan=False, allow_infinity=False)
coords = st.floats(min_value=-5, max_value=5, allow_nan=False)
angles = st.floats(min_value=-10, max_value=10, allow_nan=False)
poses = st.builds(Pose2D, coords, coords, angles)
actions = st.builds(ActionTriple, *(st.sampled_from([-1, 0, 1]) for _ in range(3)))
NOISELESS = KinematicsConfig().noiseless()


def test_normalize_angle_examples():
    assert normalize_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2)
    assert normalize_angle(-math.pi) == math.pi
    assert normalize_angle(0.0) == 0.0
    assert normalize_angle(math.pi) == math.pi


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_normalize_angle_rejects_non_finite(bad):
    with pytest.raises(InvalidArgument):
        normalize_angle(bad)


@given(finite)
def test_normalize_angle_range_and_congruence(x):
    y = normalize_angle(x)
    assert -math.pi < y <= math.pi
    k = (x - y) / (2 * math.pi)
    assert abs(k - round(k)) < 1e-9 * max(1.0, abs(x))


@given(finite)
def test_normalize_angle_idempotent(x):
    y = normalize_angle(x)
    assert normalize_angle(y) == y


def test_pose_error_examples():
    dx, dy, dth = pose_error_in_robot_frame(Pose2D(0, 0, math.pi / 2), Pose2D(1, 0, 0))
    assert (dx, dy, dth) == pytest.approx((0.0, -1.0, -math.pi / 2), abs=1e-12)
    assert pose_error_in_robot_frame(Pose2D(2, 3, 0), Pose2D(2.5, 3, 0)) == pytest.approx((0.5, 0, 0))


@given(poses)
def test_pose_error_identity(p):
    assert pose_error_in_robot_frame(p, p) == (0.0, 0.0, 0.0)


@given(poses, poses, poses)
def test_pose_error_se2_equivariance(robot, goal, t):
    a = pose_error_in_robot_frame(robot, goal)
    b = pose_error_in_robot_frame(t.compose(robot), t.compose(goal))
    assert a[0] == pytest.approx(b[0], abs=1e-9)
    assert a[1] == pytest.approx(b[1], abs=1e-9)
    assert abs(normalize_angle(a[2] - b[2])) < 1e-9


def test_apply_action_examples():
    assert apply_action(Pose2D(0, 0, 0), ActionTriple(1, 0, 0), NOISELESS) == Pose2D(0.05, 0, 0)
    p = apply_action(Pose2D(0, 0, math.pi / 2), ActionTriple(1, 0, 0), NOISELESS)
    assert (p.x, p.y, p.theta) == pytest.approx((0, 0.05, math.pi / 2), abs=1e-15)


@given(poses)
def test_stop_is_identity_without_noise(p):
    assert apply_action(p, STOP, NOISELESS) == p


@given(poses, st.sampled_from([0, 1, 2]))
def test_apply_action_invertible_per_axis(p, axis):
    fwd = [0, 0, 0]
    fwd[axis] = 1
    back = [-v for v in fwd]
    q = apply_action(apply_action(p, ActionTriple(*fwd), NOISELESS), ActionTriple(*back), NOISELESS)
    assert q.x == pytest.approx(p.x, abs=1e-12)
    assert q.y == pytest.approx(p.y, abs=1e-12)
    assert abs(normalize_angle(q.theta - p.theta)) < 1e-12


def test_apply_action_noise_is_seeded():
    kin = KinematicsConfig()
    a = apply_action(Pose2D(0, 0, 0), ActionTriple(1, 1, 1), kin, np.random.default_rng(3))
    b = apply_action(Pose2D(0, 0, 0), ActionTriple(1, 1, 1), kin, np.random.default_rng(3))
    assert a == b
    assert a != apply_action(Pose2D(0, 0, 0), ActionTriple(1, 1, 1), NOISELESS)
    with pytest.raises(InvalidArgument):
        apply_action(Pose2D(0, 0, 0), STOP, kin, None)


def test_action_validation_and_indices():
    with pytest.raises(InvalidArgument):
        ActionTriple(2, 0, 0)
    a = ActionTriple(-1, 0, 1)
    assert a.class_indices() == (0, 1, 2)
    assert ActionTriple.from_indices(a.class_indices()) == a
    assert STOP.is_stop and not a.is_stop


def test_kinematics_validation():
    with pytest.raises(InvalidArgument):
        KinematicsConfig(step_xy=0)
    with pytest.raises(InvalidArgument):
        KinematicsConfig(noise_theta=-1)


def test_object_instance_validation():
    inst = ObjectInstance("a", "chair", rectangle(0.4, 0.5)[::-1], 0.9, 1)
    # clockwise input is stored counter-clockwise
    pts = inst.polygon
    assert 0.5 * np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - pts[:, 1] * np.roll(pts[:, 0], -1)) > 0
    with pytest.raises(InvalidArgument):
        ObjectInstance("b", "chair", ((0, 0), (1, 0)), 0.9, 1)
    with pytest.raises(InvalidArgument):
        ObjectInstance("c", "chair", ((0, 0), (1, 0), (2, 0)), 0.9, 1)
    with pytest.raises(InvalidArgument):
        ObjectInstance("d", "chair", ((0, 0), (2, 0), (1, 0.2), (1, 2), (0, 2)), 0.9, 1)
    with pytest.raises(InvalidArgument):
        ObjectInstance("e", "chair", rectangle(1, 1), 0.9, 1, category_blend=1.5)
    assert ObjectInstance.from_dict(inst.to_dict()) == inst


def test_grid_sizes():
    anchor = Pose2D(0.8, 0.0, 0.0)
    assert len(enumerate_start_poses(TRAINING_GRID, anchor)) == 715
    assert len(enumerate_start_poses(ROLLOUT_GRID, anchor)) == 49


def test_single_entry_grid_offset():
    grid = StartPoseGrid((1.0,), (90.0,), (0.0,))
    (p,) = enumerate_start_poses(grid, Pose2D(1.0, 2.0, 0.0))
    assert (p.x, p.y) == pytest.approx((1.0, 3.0))
    # looks back along the ray towards the anchor
    assert p.theta == pytest.approx(-math.pi / 2)


def test_grid_ordering_and_object_frame():
    grid = StartPoseGrid((0.5, 1.0), (0.0, 30.0), (0.0, 90.0))
    rotated = enumerate_start_poses(grid, Pose2D(0, 0, math.pi / 2))
    world = enumerate_start_poses(grid, Pose2D(0, 0, math.pi / 2), object_frame=False)
    assert [round(math.hypot(p.x, p.y), 9) for p in rotated] == [0.5] * 4 + [1.0] * 4
    assert rotated[0].x == pytest.approx(0.0, abs=1e-12) and rotated[0].y == pytest.approx(0.5)
    assert world[0].x == pytest.approx(0.5) and world[0].y == pytest.approx(0.0, abs=1e-12)
    assert rotated[1].theta == pytest.approx(normalize_angle(rotated[0].theta + math.pi / 2))


def test_empty_grid_rejected():
    with pytest.raises(InvalidArgument):
        enumerate_start_poses(StartPoseGrid((), (0.0,), (0.0,)), Pose2D(0, 0, 0))


@settings(max_examples=50)
@given(poses, actions)
def test_pose_dict_round_trip(p, a):
    assert Pose2D.from_dict(p.to_dict()) == p
    assert ActionTriple(*a.as_tuple()) == a
