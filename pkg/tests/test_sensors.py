import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lastmeter.geometry import InvalidArgument, ObjectInstance, Pose2D, Scene, rectangle
from lastmeter.sensors import (
    CameraRig,
    DegenerateGeometry,
    Environment,
    ObservationSet,
    SegmentationResult,
    SegNoiseModel,
    ViewSpec,
    background_vector,
    default_rig,
    project_object,
    read_observation,
    render_observation,
    segment,
    write_observation,
)

RIG = default_rig()
CHAIR = ObjectInstance("chair", "chair", rectangle(0.45, 0.55), 0.9, 1001)
QUIET = Environment("quiet", 11, 0.0)


def front(rig=RIG):
    return rig.views[rig.index("front")]


def robot_facing_origin(dist, bearing=0.0):
    """Robot at ``dist`` from the origin along world angle ``bearing``, looking at it."""
    return Pose2D(dist * math.cos(bearing), dist * math.sin(bearing), bearing + math.pi)


def test_rig_validation():
    assert RIG.shape == (16, 16, 32)
    assert RIG.names == ("front", "right", "back", "left")
    views = list(RIG.views)
    with pytest.raises(InvalidArgument):
        CameraRig(tuple(views[:3]))
    narrow = tuple(ViewSpec(v.name, v.yaw_offset, math.radians(60)) for v in views)
    with pytest.raises(InvalidArgument):
        CameraRig(narrow)
    mixed = (ViewSpec("front", 0.0, math.radians(120), (8, 8)), *views[1:])
    with pytest.raises(InvalidArgument):
        CameraRig(mixed)


def test_object_ahead_is_centred():
    seg = project_object(robot_facing_origin(1.0), CHAIR, Pose2D(0, 0, 0), front(), RIG)
    assert seg.present
    u0, _, u1, _ = seg.bbox
    assert abs((u0 + u1) / 2 - 0.5) < 0.05


def test_object_behind_is_absent_in_front_view():
    robot = Pose2D(1.0, 0.0, 0.0)  # looking away from the object
    seg = project_object(robot, CHAIR, Pose2D(0, 0, 0), front(), RIG)
    assert not seg.present
    assert not seg.mask.any()
    assert seg.bbox == (0.0, 0.0, 0.0, 0.0)


def test_closer_object_is_larger():
    near = project_object(robot_facing_origin(0.5), CHAIR, Pose2D(0, 0, 0), front(), RIG)
    far = project_object(robot_facing_origin(1.0), CHAIR, Pose2D(0, 0, 0), front(), RIG)
    assert near.area > far.area


def test_apparent_size_non_increasing_with_distance():
    # cell-quantised masks can plateau; they never grow as the robot backs away
    areas = [project_object(robot_facing_origin(d), CHAIR, Pose2D(0, 0, 0), front(), RIG).area
             for d in np.linspace(0.5, 3.0, 26)]
    assert all(a >= b for a, b in zip(areas, areas[1:]))
    assert areas[0] > areas[-1]


def test_degenerate_at_centroid():
    with pytest.raises(DegenerateGeometry):
        project_object(Pose2D(0, 0, 0), CHAIR, Pose2D(0, 0, 0), front(), RIG)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.4, 3.0), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
def test_object_visible_in_some_view(dist, bearing, heading):
    robot = Pose2D(dist * math.cos(bearing), dist * math.sin(bearing), heading)
    segs = [project_object(robot, CHAIR, Pose2D(0, 0, 0), v, RIG) for v in RIG.views]
    assert any(s.present for s in segs)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.4, 3.0), st.floats(-math.pi, math.pi), st.floats(-0.8, 0.8))
def test_bbox_is_tight(dist, bearing, turn):
    robot = Pose2D(dist * math.cos(bearing), dist * math.sin(bearing), bearing + math.pi + turn)
    for v in RIG.views:
        seg = project_object(robot, CHAIR, Pose2D(0, 0, 0), v, RIG)
        if not seg.present:
            continue
        r0, r1, c0, c1 = seg.cell_bounds()
        m = seg.mask
        assert m[r0].any() and m[r1 - 1].any() and m[:, c0].any() and m[:, c1 - 1].any()
        assert not m[:r0].any() and not m[r1:].any() and not m[:, :c0].any() and not m[:, c1:].any()


def test_render_is_deterministic_and_seeded():
    scene = Scene(CHAIR)
    env = Environment()
    robot = robot_facing_origin(0.9, 0.3)
    a = render_observation(robot, scene, RIG, env, np.random.default_rng(5))
    b = render_observation(robot, scene, RIG, env, np.random.default_rng(5))
    assert a.features.dtype == np.float32
    assert np.array_equal(a.features, b.features)
    c = render_observation(robot, scene, RIG, env, np.random.default_rng(6))
    assert not np.array_equal(a.features, c.features)


def test_feature_locality_without_noise():
    obs = render_observation(robot_facing_origin(0.8), Scene(CHAIR), RIG, QUIET, None)
    bg = background_vector(QUIET.background_seed, RIG.shape[2]).astype(np.float32)
    mask = obs.object_masks["chair"]
    assert mask.any()
    assert np.array_equal(obs.features[~mask], np.broadcast_to(bg, obs.features[~mask].shape))
    inside = obs.features[mask]
    assert np.min(np.linalg.norm(inside - bg, axis=1)) > 0.1


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-math.pi, math.pi))
def test_surface_features_follow_the_object(tx, ty, rot):
    # moving robot and object by the same rigid transform sees the same surface points
    robot = robot_facing_origin(0.9, 0.3)
    shift = Pose2D(tx, ty, rot)
    a = render_observation(robot, Scene(CHAIR), RIG, QUIET, None)
    b = render_observation(shift.compose(robot), Scene(CHAIR, shift), RIG, QUIET, None)
    assert np.array_equal(a.object_masks["chair"], b.object_masks["chair"])
    assert np.allclose(a.features, b.features, atol=1e-5)


def test_category_only_instances_share_features():
    twin_a = ObjectInstance("a", "chair", rectangle(0.45, 0.55), 0.9, 1, category_blend=1.0)
    twin_b = ObjectInstance("b", "chair", rectangle(0.45, 0.55), 0.9, 2, category_blend=1.0)
    other = ObjectInstance("c", "chair", rectangle(0.45, 0.55), 0.9, 2, category_blend=0.7)
    robot = robot_facing_origin(0.9, 0.2)
    fa = render_observation(robot, Scene(twin_a), RIG, QUIET, None).features
    fb = render_observation(robot, Scene(twin_b), RIG, QUIET, None).features
    fc = render_observation(robot, Scene(other), RIG, QUIET, None).features
    assert np.array_equal(fa, fb)
    assert not np.array_equal(fa, fc)


def test_zero_noise_segmentation_is_oracle():
    obs = render_observation(robot_facing_origin(0.8, 0.4), Scene(CHAIR), RIG, Environment(),
                             np.random.default_rng(0))
    segs = segment(obs, "chair", SegNoiseModel(), np.random.default_rng(1))
    for s, o in zip(segs, obs.segs):
        assert np.array_equal(s.mask, o.mask) and s.bbox == o.bbox and s.present == o.present


def test_certain_dropout_hides_every_view():
    obs = render_observation(robot_facing_origin(0.8), Scene(CHAIR), RIG, QUIET, None)
    segs = segment(obs, "chair", SegNoiseModel(dropout_prob=1.0), np.random.default_rng(1))
    assert not any(s.present for s in segs)


def test_unknown_target_rejected():
    obs = render_observation(robot_facing_origin(0.8), Scene(CHAIR), RIG, QUIET, None)
    with pytest.raises(InvalidArgument):
        segment(obs, "sofa", SegNoiseModel(), np.random.default_rng(0))


def test_false_positive_returns_distractor():
    sofa = ObjectInstance("sofa", "sofa", rectangle(0.5, 0.5), 0.6, 7)
    scene = Scene(CHAIR, distractors=[(sofa, Pose2D(0.0, 1.2, 0.0))])
    obs = render_observation(Pose2D(1.2, 0.6, math.pi * 0.9), scene, RIG, QUIET, None)
    segs = segment(obs, "chair", SegNoiseModel(false_positive_prob=1.0), np.random.default_rng(0))
    for vi, s in enumerate(segs):
        assert np.array_equal(s.mask, obs.object_masks["sofa"][vi])


def test_jitter_changes_mask_by_morphology_only():
    obs = render_observation(robot_facing_origin(0.8), Scene(CHAIR), RIG, QUIET, None)
    base = obs.object_masks["chair"][0]
    for seed in range(20):
        s = segment(obs, "chair", SegNoiseModel(jitter_cells=1), np.random.default_rng(seed))[0].mask
        assert s.sum() != base.sum() or np.array_equal(s, base)
        assert (s <= base).all() or (s >= base).all()


def test_segmentation_draws_are_shared_across_noise_levels():
    obs = render_observation(robot_facing_origin(0.8), Scene(CHAIR), RIG, QUIET, None)
    r1, r2 = np.random.default_rng(9), np.random.default_rng(9)
    segment(obs, "chair", SegNoiseModel(), r1)
    segment(obs, "chair", SegNoiseModel(0.3, 1, 0.1, 0.2), r2)
    assert r1.random() == r2.random()


def _square_mask_obs(n_side=10, grid=16):
    mask = np.zeros((1, grid, grid), dtype=bool)
    mask[0, 3:3 + n_side, 3:3 + n_side] = True
    seg = SegmentationResult.from_mask("front", mask[0])
    feats = np.zeros((1, grid, grid, 4), dtype=np.float32)
    return ObservationSet(("front",), feats, (seg,), Pose2D(0, 0, 0), "t", {"t": mask})


def test_flicker_toggle_rate_monte_carlo():
    obs = _square_mask_obs()
    base = obs.object_masks["t"][0]
    n, p, seeds = int(base.sum()), 0.1, 2000
    toggled = [int((segment(obs, "t", SegNoiseModel(flicker_prob=p), np.random.default_rng(s))[0].mask
                    != base)[base].sum()) for s in range(seeds)]
    mean = float(np.mean(toggled))
    sigma = math.sqrt(n * p * (1 - p) / seeds)
    assert n == 100
    assert abs(mean - n * p) <= 3 * sigma


def test_noise_model_validation():
    with pytest.raises(InvalidArgument):
        SegNoiseModel(dropout_prob=1.5)
    with pytest.raises(InvalidArgument):
        SegNoiseModel(jitter_cells=-1)


def test_sidecar_round_trip():
    obs = render_observation(robot_facing_origin(0.8, 0.1), Scene(CHAIR), RIG, Environment(),
                             np.random.default_rng(2))
    buf = io.BytesIO()
    n1 = write_observation(buf, obs)
    custom = np.zeros((4, 16, 16), dtype=bool)
    custom[1, 2, 3] = True
    n2 = write_observation(buf, obs, custom)
    assert buf.tell() == n1 + n2
    raw = buf.getvalue()
    assert raw[:5] == b"LMOB1"
    assert np.frombuffer(raw[5:21], dtype="<u4").tolist() == [16, 16, 32, 4]
    buf.seek(0)
    feats, masks = read_observation(buf)
    assert np.array_equal(feats, obs.features)
    assert np.array_equal(masks, obs.object_masks["chair"])
    _, masks2 = read_observation(buf)
    assert np.array_equal(masks2, custom)


def test_sidecar_bad_magic():
    with pytest.raises(ValueError):
        read_observation(io.BytesIO(b"XXXXX" + bytes(16)))
