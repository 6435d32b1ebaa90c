import json

import numpy as np
import pytest

from lastmeter import pipeline as P
from lastmeter.config import RunConfig
from lastmeter.decoders import DecoderConfig, LearnedPolicy, init_decoder
from lastmeter.expert import within_tolerance
from lastmeter.geometry import STOP, ActionTriple, InvalidArgument, Pose2D
from lastmeter.rollout import (
    AuxThresholds,
    ConfigurationError,
    ExpertOraclePolicy,
    RolloutConfig,
    StubPolicy,
    Termination,
    derive_aux_thresholds,
    read_logs,
    replay_final_pose,
    run_rollout,
    run_suite,
    termination_consistent,
    write_logs,
)

CFG = RunConfig()
GOAL = P.goal_pose(CFG)
STARTS = P.start_poses(CFG, "rollout")
WIDE = AuxThresholds(0.01, 1.0, 50.0)


@pytest.fixture(scope="module")
def quiet_sim():
    return P.make_simulator(CFG, noiseless=True)


@pytest.fixture(scope="module")
def noisy_sim():
    return P.make_simulator(CFG)


def test_constant_stop_ends_at_step_two(quiet_sim):
    cfg = RolloutConfig()
    log = run_rollout(StubPolicy(STOP), quiet_sim, STARTS[0], GOAL, cfg, seed=1)
    assert log.wall_steps == 2
    assert log.termination == Termination.STOP_ACTION
    assert log.final_pose == STARTS[0]
    assert termination_consistent(log, cfg)


def test_constant_forward_hits_max_steps(quiet_sim):
    cfg = RolloutConfig()
    log = run_rollout(StubPolicy(ActionTriple(1, 0, 0)), quiet_sim, STARTS[0], GOAL, cfg, seed=1)
    assert log.termination == Termination.MAX_STEPS
    assert log.wall_steps == 200
    assert termination_consistent(log, cfg)


def test_expert_oracle_reaches_every_rollout_start(quiet_sim):
    cfg = RolloutConfig()
    logs = run_suite(ExpertOraclePolicy, lambda i: quiet_sim, STARTS, GOAL, cfg, seed=3)
    assert len(logs) == 49
    for log in logs:
        assert log.termination == Termination.STOP_ACTION
        assert within_tolerance(log.final_pose, GOAL)


def test_replay_reproduces_final_pose(quiet_sim):
    cfg = RolloutConfig()
    for start in STARTS[::7]:
        log = run_rollout(ExpertOraclePolicy(), quiet_sim, start, GOAL, cfg, seed=5)
        replay = replay_final_pose(log, CFG.kinematics())
        assert abs(replay.x - log.final_pose.x) < 1e-9
        assert abs(replay.y - log.final_pose.y) < 1e-9
        assert abs(replay.theta - log.final_pose.theta) < 1e-9
    log = run_rollout(StubPolicy(ActionTriple(0, 1, 1)), quiet_sim, STARTS[3], GOAL, cfg, seed=5)
    assert replay_final_pose(log, CFG.kinematics()) == pytest.approx(log.final_pose)


def _random_policy():
    dcfg = DecoderConfig("score", grid=2)
    return lambda: LearnedPolicy(dcfg, init_decoder(dcfg, np.random.default_rng(11)))


@pytest.mark.parametrize("rule", ["stop_gated", "conjunction"])
def test_aux_never_lengthens_an_episode(noisy_sim, rule):
    base = RolloutConfig(max_steps=60)
    aux = RolloutConfig(max_steps=60, aux_stop=True, aux=WIDE, aux_rule=rule)
    for factory in (ExpertOraclePolicy, _random_policy()):
        for i in range(0, 49, 6):
            off = run_rollout(factory(), noisy_sim, STARTS[i], GOAL, base, seed=8, start_index=i)
            on = run_rollout(factory(), noisy_sim, STARTS[i], GOAL, aux, seed=8, start_index=i)
            assert on.wall_steps <= off.wall_steps
            assert [s.action for s in on.steps] == [s.action for s in off.steps[:on.wall_steps]]
            assert termination_consistent(on, aux)


def test_stop_gated_rule_only_fires_on_a_stop(noisy_sim):
    cfg = RolloutConfig(max_steps=30, aux_stop=True, aux=WIDE)
    log = run_rollout(StubPolicy(ActionTriple(0, 0, 1)), noisy_sim, Pose2D(0.9, 0.0, 3.1), GOAL, cfg, seed=2)
    assert log.termination == Termination.MAX_STEPS
    lit = RolloutConfig(max_steps=30, aux_stop=True, aux=WIDE, aux_rule="conjunction")
    log = run_rollout(StubPolicy(ActionTriple(0, 0, 1)), noisy_sim, Pose2D(0.9, 0.0, 3.1), GOAL, lit, seed=2)
    assert log.termination == Termination.AUX_STOP and log.wall_steps == 1


def test_parallel_matches_sequential(noisy_sim):
    cfg = RolloutConfig(max_steps=40)
    seq = run_suite(ExpertOraclePolicy, lambda i: noisy_sim, STARTS[:12], GOAL, cfg, seed=4)
    par = run_suite(ExpertOraclePolicy, lambda i: noisy_sim, STARTS[:12], GOAL, cfg, seed=4, workers=4)
    for a, b in zip(seq, par):
        assert a.final_pose == b.final_pose
        assert a.termination == b.termination
        assert [s.logits for s in a.steps] == [s.logits for s in b.steps]


def test_derive_thresholds_examples():
    th = derive_aux_thresholds([0.10, 0.20], [(1.0, 1.0), (2.0, 2.0)], [(1.0, 1.0), (2.0, 2.0)])
    assert th.bbox_area_lo == pytest.approx(0.105)
    assert th.bbox_area_hi == pytest.approx(0.195)
    assert th.com_radius == 0.0
    th = derive_aux_thresholds([0.3] * 5, [(4.0, 4.0)] * 5, [(4.0, 4.0)] * 5)
    assert th.bbox_area_lo == th.bbox_area_hi == 0.3
    assert th.com_radius == 0.0
    with pytest.raises(InvalidArgument):
        derive_aux_thresholds([], [], [])
    with pytest.raises(InvalidArgument):
        derive_aux_thresholds([0.1], [None], [(1.0, 1.0)])


def test_config_validation():
    with pytest.raises(InvalidArgument):
        RolloutConfig(max_steps=0)
    with pytest.raises(InvalidArgument):
        RolloutConfig(aux_stop=True)
    with pytest.raises(InvalidArgument):
        RolloutConfig(aux_stop=True, aux=AuxThresholds(0.0, 0.2, 1.0))
    with pytest.raises(InvalidArgument):
        RolloutConfig(aux_rule="either")


def test_policy_dim_mismatch_is_configuration_error(quiet_sim):
    dcfg = DecoderConfig("score", grid=2, feature_dim=16)
    policy = LearnedPolicy(dcfg, init_decoder(dcfg, np.random.default_rng(0)))
    with pytest.raises(ConfigurationError):
        run_rollout(policy, quiet_sim, STARTS[0], GOAL, RolloutConfig(), seed=0)


def test_log_round_trip(tmp_path, noisy_sim):
    cfg = RolloutConfig(max_steps=30)
    logs = run_suite(ExpertOraclePolicy, lambda i: noisy_sim, STARTS[:3], GOAL, cfg, seed=6,
                     grid_id="g", tags={"policy": "x"})
    path = tmp_path / "r.jsonl"
    write_logs(path, logs, {"config_hash": "abc"})
    header, back = read_logs(path)
    assert header["config_hash"] == "abc" and header["rollouts"] == 3
    for a, b in zip(logs, back):
        assert (a.final_pose, a.termination, a.wall_steps, a.grid_id, a.tags) == \
            (b.final_pose, b.termination, b.wall_steps, b.grid_id, b.tags)
        assert a.final_com == b.final_com and a.goal_com == b.goal_com
        assert [s.action for s in a.steps] == [s.action for s in b.steps]


def test_malformed_log_line_is_located(tmp_path, noisy_sim):
    logs = run_suite(ExpertOraclePolicy, lambda i: noisy_sim, STARTS[:1], GOAL, RolloutConfig(max_steps=20), seed=6)
    path = tmp_path / "r.jsonl"
    write_logs(path, logs)
    lines = path.read_text().splitlines()
    lines[2] = lines[2][:-5]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=r"r\.jsonl:3: malformed"):
        read_logs(path)
    lines = path.read_text().splitlines()
    lines[2] = json.dumps({"kind": "mystery"})
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ValueError, match=":3:"):
        read_logs(path)
