from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from rewardwin import constants as C
from rewardwin import simenv
from rewardwin.rewardwin_common import ConfigError, UsageError
from rewardwin.simenv import EnvConfig, JointAngles, WorldState


def _lifted_state(config: EnvConfig) -> WorldState:
    joints = JointAngles(110.0, 90.0, 40.0, 150.0)
    gripper = tuple(float(v) for v in simenv.gripper_position(joints, config))
    return WorldState(joints, gripper, True, 10)


def _resting_state(config: EnvConfig) -> WorldState:
    joints = JointAngles(25.0, 90.0, 5.0, 15.0)
    return WorldState(joints, (0.25, -0.05, simenv.resting_height(config)), False, 0)


def test_zero_pose_hangs_straight_down(env_config):
    tip = simenv.forward_kinematics(JointAngles(0.0, 0.0, 0.0, 0.0), env_config)
    assert np.allclose(tip, [0.0, 0.0, -env_config.reach])


def test_right_angle_elbow(env_config):
    tip = simenv.forward_kinematics(JointAngles(0.0, 0.0, 90.0, 0.0), env_config)
    expected = math.hypot(env_config.upper_arm_len, env_config.forearm_len)
    assert np.linalg.norm(tip) == pytest.approx(expected)


def test_straight_arm_forward_and_left(env_config):
    forward = simenv.forward_kinematics(JointAngles(90.0, 90.0, 0.0, 0.0), env_config)
    left = simenv.forward_kinematics(JointAngles(90.0, 180.0, 0.0, 0.0), env_config)
    assert np.allclose(forward, [env_config.reach, 0.0, 0.0], atol=1e-12)
    assert np.allclose(left, [0.0, env_config.reach, 0.0], atol=1e-12)


def test_reach_obeys_triangle_inequality(env_config):
    rng = np.random.default_rng(0)
    lo = abs(env_config.upper_arm_len - env_config.forearm_len)
    for angles in rng.uniform(0.0, 180.0, size=(1000, 4)):
        d = np.linalg.norm(simenv.forward_kinematics(JointAngles.from_array(angles), env_config))
        assert lo - 1e-12 <= d <= env_config.reach + 1e-12


def test_reset_is_deterministic(env_config):
    assert simenv.reset(env_config, 17) == simenv.reset(env_config, 17)
    assert simenv.reset(env_config, 17) != simenv.reset(env_config, 18)


def test_reset_places_cube_on_table_within_reach(env_config):
    for seed in range(1000):
        state = simenv.reset(env_config, seed)
        assert state.cube_position[2] == env_config.table_height + env_config.cube_side / 2.0
        assert not state.grasped and state.step_index == 0
        gripper = simenv.gripper_position(state.joints, env_config)
        assert np.linalg.norm(gripper - np.array(state.cube_position)) <= env_config.reach
        assert env_config.table_near <= state.cube_position[0] <= env_config.table_far


def test_reset_distractor_keeps_its_distance(env_config):
    for seed in range(50):
        state = simenv.reset(env_config, seed)
        cube, other = state.cube_position, state.distractor_position
        assert other is not None
        assert math.hypot(cube[0] - other[0], cube[1] - other[1]) >= simenv.DISTRACTOR_GAP


def test_reset_without_distractor():
    state = simenv.reset(EnvConfig(distractor=False), 3)
    assert state.distractor_position is None


def test_unreachable_table_is_a_config_error():
    config = EnvConfig(table_near=0.60, table_far=0.80, cube_center=(0.7, 0.0), cube_spread=0.05)
    with pytest.raises(ConfigError):
        simenv.reset(config, 0)


def test_zero_action_keeps_joints(env_config):
    state = simenv.reset(env_config, 5)
    new, result = simenv.step(state, np.zeros(4), env_config)
    assert new.joints == state.joints
    assert new.step_index == 1
    assert result.done_reason == C.DONE_RUNNING and not result.done


def test_actions_clamp_at_joint_limits(env_config):
    state = dataclasses.replace(simenv.reset(env_config, 5), joints=JointAngles(175.0, 2.0, 90.0, 90.0))
    new = simenv.simulate(state, [1.0, -1.0, 5.0, 0.0], env_config)
    assert new.joints.shoulder_pitch == 180.0
    assert new.joints.shoulder_roll == 0.0
    assert new.joints.elbow_roll == 90.0 + env_config.omega_max


def test_bad_actions_are_usage_errors(env_config):
    state = simenv.reset(env_config, 0)
    with pytest.raises(UsageError):
        simenv.step(state, [0.0, 0.0, 0.0], env_config)
    with pytest.raises(UsageError):
        simenv.step(state, [0.0, np.nan, 0.0, 0.0], env_config)


def test_stepping_a_finished_episode_is_a_usage_error(env_config):
    config = dataclasses.replace(env_config, max_steps=2)
    state = simenv.reset(config, 0)
    state, _ = simenv.step(state, np.zeros(4), config)
    state, result = simenv.step(state, np.zeros(4), config)
    assert result.done and result.done_reason == C.DONE_TIMEOUT
    with pytest.raises(UsageError):
        simenv.step(state, np.zeros(4), config)


def test_grasp_follows_gripper_and_release_drops_cube(env_config):
    joints = JointAngles(80.0, 90.0, 40.0, 119.0)
    gripper = tuple(float(v) for v in simenv.gripper_position(joints, env_config))
    state = WorldState(joints, gripper, False, 0)

    state = simenv.simulate(state, [0.0, 0.0, 0.0, 1.0], env_config)
    assert state.grasped
    state = simenv.simulate(state, [0.5, 0.0, 0.0, 0.0], env_config)
    assert state.cube_position == tuple(simenv.gripper_position(state.joints, env_config))

    state = simenv.simulate(state, [0.0, 0.0, 0.0, -1.0], env_config)
    assert not state.grasped
    assert state.cube_position[2] == simenv.resting_height(env_config)


def test_open_hand_near_cube_does_not_grasp(env_config):
    joints = JointAngles(80.0, 90.0, 40.0, 10.0)
    gripper = tuple(float(v) for v in simenv.gripper_position(joints, env_config))
    state = simenv.simulate(WorldState(joints, gripper, False, 0), np.zeros(4), env_config)
    assert not state.grasped


def test_success_needs_grasp_and_lift(env_config):
    lifted = _lifted_state(env_config)
    assert simenv.is_success(lifted, env_config)
    assert not simenv.is_success(dataclasses.replace(lifted, grasped=False), env_config)
    assert not simenv.is_success(_resting_state(env_config), env_config)


def test_render_shape_range_and_purity(env_config):
    state = simenv.reset(env_config, 2)
    img = simenv.render(state, env_config)
    assert img.shape == (env_config.height, env_config.width)
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert np.array_equal(img, simenv.render(state, env_config))
    palette = {C.BACKGROUND_INTENSITY, C.TABLE_INTENSITY, C.ARM_INTENSITY, C.GRIPPER_INTENSITY, C.CUBE_INTENSITY}
    assert set(np.unique(img)) <= palette


def test_render_draws_cube_and_table(env_config):
    img = simenv.render(_resting_state(env_config), env_config, (320, 240))
    assert np.any(img == C.CUBE_INTENSITY)
    assert np.any(img == C.TABLE_INTENSITY)


def test_lifted_and_resting_scenes_differ(env_config):
    a = simenv.render(_lifted_state(env_config), env_config)
    b = simenv.render(_resting_state(env_config), env_config)
    assert np.mean(a != b) >= 0.01


def test_gripper_disc_shrinks_when_closing(env_config):
    joints = JointAngles(60.0, 90.0, 30.0, 0.0)
    far = (0.3, 0.3, simenv.resting_height(env_config))
    open_img = simenv.render(WorldState(joints, far, False, 0), env_config, (320, 240))
    closed = dataclasses.replace(joints, hand=180.0)
    closed_img = simenv.render(WorldState(closed, far, False, 0), env_config, (320, 240))
    assert (open_img == C.GRIPPER_INTENSITY).sum() > (closed_img == C.GRIPPER_INTENSITY).sum()


def test_expert_stops_at_success(env_config):
    assert np.array_equal(simenv.scripted_expert(_lifted_state(env_config), env_config), np.zeros(4))


def test_expert_lifts_once_grasped(env_config):
    joints = JointAngles(80.0, 90.0, 40.0, 150.0)
    gripper = tuple(float(v) for v in simenv.gripper_position(joints, env_config))
    action = simenv.scripted_expert(WorldState(joints, gripper, True, 3), env_config)
    assert action[0] > 0 and action[3] > 0


@pytest.mark.parametrize("seed", range(20))
def test_expert_solves_episode(env_config, seed):
    states = simenv.expert_rollout(env_config, seed)
    assert simenv.is_success(states[-1], env_config)
    assert len(states) - 1 <= env_config.max_steps


def test_expert_rollout_keeps_invariants(small_env):
    states = simenv.expert_rollout(small_env, 4)
    for state in states:
        angles = state.joints.as_array()
        assert np.all((angles >= 0.0) & (angles <= 180.0))
        if state.grasped:
            assert state.cube_position == tuple(simenv.gripper_position(state.joints, small_env))


def test_environment_wrapper(small_env):
    env = simenv.Environment(small_env)
    with pytest.raises(UsageError):
        env.step(np.zeros(4))
    obs = env.reset(9)
    assert obs.shape == (small_env.height, small_env.width)
    result = None
    while not env.done:
        result = env.step(env.expert_action())
    assert result.ground_truth_success and result.done_reason == C.DONE_SUCCESS


def test_small_env_starts_at_the_grasp_pose(small_env):
    for seed in range(50):
        state = simenv.reset(small_env, seed)
        gap = np.linalg.norm(simenv.gripper_position(state.joints, small_env) - np.array(state.cube_position))
        assert gap <= small_env.grasp_radius
        assert state.joints.hand >= small_env.hand_close_threshold
        assert not state.grasped


def test_small_env_expert_lifts_in_a_few_steps(small_env):
    lengths = [len(simenv.expert_rollout(small_env, seed)) - 1 for seed in range(50)]
    assert max(lengths) <= 6
    assert min(lengths) >= 2


def _random_rollout(config: EnvConfig, seed: int, rng: np.random.Generator) -> bool:
    state = simenv.reset(config, seed)
    while not simenv.is_done(state, config):
        state = simenv.simulate(state, rng.uniform(-1.0, 1.0, size=4), config)
    return simenv.is_success(state, config)


def test_random_actions_sometimes_succeed_on_small_env(small_env):
    rng = np.random.default_rng(0)
    wins = sum(_random_rollout(small_env, seed, rng) for seed in range(200))
    assert wins > 0


def test_config_validation_and_preferences(tmp_path):
    with pytest.raises(ConfigError):
        EnvConfig(max_steps=0)
    with pytest.raises(ConfigError):
        EnvConfig(resolution=(4, 3))
    with pytest.raises(ConfigError):
        EnvConfig(rest_pose=(10.0, 20.0, 30.0))
    with pytest.raises(ConfigError):
        EnvConfig(rest_pose=(10.0, 20.0, 30.0, 200.0))
    with pytest.raises(ConfigError):
        EnvConfig.from_preferences({"rest_pose": "1, 2"})
    assert EnvConfig.from_preferences({"rest_pose": "1, 2, 3, 4"}).rest_pose == (1.0, 2.0, 3.0, 4.0)
    config = EnvConfig(resolution=(64, 48), cube_spread=0.1, distractor=False, rest_pose=(30.0, 80.0, 10.0, 0.0))
    path = tmp_path / "env.conf"
    path.write_text(config.to_preferences())
    assert EnvConfig.load(path) == config
    with pytest.raises(ConfigError):
        EnvConfig.from_preferences({"arm_len": "1"})


@pytest.mark.slow
def test_expert_solves_a_thousand_resets(env_config):
    failures = [seed for seed in range(1000)
                if not simenv.is_success(simenv.expert_rollout(env_config, seed)[-1], env_config)]
    assert failures == []
