from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from rewardwin import constants as C
from rewardwin import nncore as nn
from rewardwin import rlalgos as rl
from rewardwin.rewardwin_common import (ConfigError, DataError, FormatError, NonFiniteError, ShapeError,
                                        UsageError)
from rewardwin.rlalgos import Agent, HyperParams, ReplayBuffer, Transition, TransitionBatch
from rewardwin.staterepr import Pixels, RewardWindow

SPEC = RewardWindow(15)
SMALL = HyperParams(hidden=8, batch_size=8, seed=3)


def _transition(rng, dim=15, done=False, reward=None) -> Transition:
    return Transition(rng.random(dim), rng.uniform(-1, 1, size=4),
                      float(rng.random()) if reward is None else reward, rng.random(dim), done)


def _batch(rng, n=8, dim=15, done=False) -> TransitionBatch:
    return TransitionBatch.of([_transition(rng, dim, done) for _ in range(n)])


def _constant_critic(critic: nn.NetworkParams, value: float) -> nn.NetworkParams:
    weights, biases = list(critic.weights), list(critic.biases)
    weights[-1] = np.zeros_like(weights[-1])
    biases[-1] = np.full_like(biases[-1], value)
    return critic.with_arrays(weights, biases)


def test_buffer_evicts_oldest_first(rng):
    buf = ReplayBuffer(3, seed=0)
    items = [_transition(rng) for _ in range(4)]
    for t in items:
        rl.buffer_push(buf, t)
    assert len(buf) == 3
    assert buf.ordered() == items[1:]
    rl.buffer_push(buf, items[0])
    assert buf.ordered() == items[2:] + items[:1]


def test_buffer_sampling_is_uniform():
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(10, seed=1)
    for i in range(10):
        buf.push(_transition(rng, reward=i / 10.0))
    drawn = np.concatenate([buf.sample_indices(10) for _ in range(10000)])
    counts = np.bincount(drawn, minlength=10)
    assert np.all(np.abs(counts / 100000.0 - 0.1) <= 0.01)
    with pytest.raises(UsageError):
        buf.sample_indices(11)


def test_buffer_sampling_is_seeded(rng):
    items = [_transition(rng) for _ in range(20)]
    a, b = ReplayBuffer(50, seed=7), ReplayBuffer(50, seed=7)
    for t in items:
        a.push(t)
        b.push(t)
    first, second = rl.buffer_sample(a, 8), rl.buffer_sample(b, 8)
    assert np.array_equal(first.states, second.states)
    assert np.array_equal(first.rewards, second.rewards)


def test_underfilled_buffer_refuses_to_sample(rng):
    buf = ReplayBuffer(10)
    buf.push(_transition(rng))
    with pytest.raises(UsageError):
        buf.sample(2)


def test_transition_contract(rng):
    with pytest.raises(DataError):
        Transition(np.zeros(3), np.zeros(4), 1.5, np.zeros(3), False)
    with pytest.raises(ShapeError):
        Transition(np.zeros(3), np.zeros(4), 0.5, np.zeros(4), False)
    with pytest.raises(DataError):
        TransitionBatch.of([])


def test_hyperparameter_validation(tmp_path):
    with pytest.raises(ConfigError):
        HyperParams(gamma=1.5)
    with pytest.raises(ConfigError):
        HyperParams(tau=0.0)
    with pytest.raises(ConfigError):
        HyperParams(policy_delay=0)
    with pytest.raises(ConfigError):
        HyperParams(expl_noise=-0.1)
    path = tmp_path / "hp.conf"
    path.write_text(SMALL.to_preferences())
    assert HyperParams.load(path) == SMALL
    assert HyperParams.from_preferences({"gamma": "0.5", "batch_size": "16"}).batch_size == 16


def test_agent_layout():
    ddpg = rl.build_agent_params(C.ALGO_DDPG, SPEC, hidden=8)
    td3 = rl.build_agent_params(C.ALGO_TD3, Pixels(8, 6), hidden=8)
    assert len(ddpg.critics) == 1 and len(td3.critics) == 2
    assert ddpg.state_dim == 15 and td3.state_dim == 48
    assert ddpg.actor.output_shape == (4,)
    assert td3.critics[0].input_shape == (52,)
    assert ddpg.target_actor.same_as(ddpg.actor)
    with pytest.raises(ConfigError):
        rl.build_agent_params("sac", SPEC)


def test_greedy_actions_are_deterministic(rng):
    agent = Agent.create(C.ALGO_DDPG, SPEC, SMALL)
    state = rng.random(15)
    a = rl.select_action(agent, state)
    assert np.array_equal(a, rl.select_action(agent, state))
    assert np.array_equal(a, rl.select_action(agent.snapshot(), state))


def test_zero_noise_exploration_matches_greedy(rng):
    agent = Agent.create(C.ALGO_TD3, SPEC, SMALL)
    state = rng.random(15)
    assert np.array_equal(rl.select_action(agent, state, explore=True, sigma=0.0), rl.select_action(agent, state))


def test_snapshot_exploration_defaults_to_the_standard_noise(rng):
    params = Agent.create(C.ALGO_DDPG, SPEC, SMALL).snapshot()
    state = rng.random(15)
    greedy = rl.select_action(params, state)
    explored = np.array([rl.select_action(params, state, explore=True, rng=np.random.default_rng(i))
                         for i in range(2000)])
    assert not np.any(np.all(explored == greedy, axis=1))
    inside = np.all(np.abs(explored) < 1.0, axis=1)
    spread = (explored[inside] - greedy).std()
    assert 0.7 * HyperParams.expl_noise <= spread <= 1.3 * HyperParams.expl_noise


def test_explored_actions_stay_in_bounds(rng):
    agent = Agent.create(C.ALGO_DDPG, SPEC, dataclasses.replace(SMALL, expl_noise=2.0))
    for _ in range(10000):
        a = rl.select_action(agent, rng.random(15), explore=True)
        assert a.shape == (4,) and np.all(np.abs(a) <= 1.0)


def test_warmup_actions_are_uniform(rng):
    agent = Agent.create(C.ALGO_DDPG, SPEC, SMALL)
    actions = np.array([rl.select_action(agent, rng.random(15), warmup=True) for _ in range(4000)])
    assert np.all(np.abs(actions) <= 1.0)
    assert np.allclose(actions.mean(axis=0), 0.0, atol=0.05)


def test_action_state_dimension_checked(rng):
    agent = Agent.create(C.ALGO_DDPG, SPEC, SMALL)
    with pytest.raises(ShapeError):
        rl.select_action(agent, rng.random(14))
    with pytest.raises(UsageError):
        rl.select_action(agent.snapshot(), rng.random(15), explore=True)


def test_terminal_targets_are_the_reward(rng):
    params = rl.build_agent_params(C.ALGO_DDPG, SPEC, hidden=8)
    batch = _batch(rng, done=True)
    assert np.array_equal(rl.ddpg_targets(params, batch, SMALL), batch.rewards)


def test_myopic_targets_are_the_reward(rng):
    params = rl.build_agent_params(C.ALGO_DDPG, SPEC, hidden=8)
    batch = _batch(rng)
    assert np.array_equal(rl.ddpg_targets(params, batch, HyperParams(gamma=0.0)), batch.rewards)


def test_td3_uses_the_smaller_critic(rng):
    params = rl.build_agent_params(C.ALGO_TD3, SPEC, hidden=8)
    targets = (_constant_critic(params.target_critics[0], 2.0), _constant_critic(params.target_critics[1], 3.0))
    params = dataclasses.replace(params, target_critics=targets)
    batch = TransitionBatch.of([Transition(rng.random(15), np.zeros(4), 0.0, rng.random(15), False)])
    y = rl.td3_targets(params, batch, HyperParams(gamma=1.0), np.random.default_rng(0))
    assert y.tolist() == [2.0]


def test_td3_without_smoothing_matches_ddpg(rng):
    td3 = rl.build_agent_params(C.ALGO_TD3, SPEC, hidden=8, seed=2)
    critic = td3.critics[0]
    td3 = dataclasses.replace(td3, critics=(critic, critic), target_critics=(critic, critic))
    ddpg = rl.AgentParams(C.ALGO_DDPG, SPEC, td3.actor, (critic,), td3.target_actor, (critic,))
    batch = _batch(rng)
    hp = HyperParams(target_noise=0.0)
    assert np.array_equal(rl.td3_targets(td3, batch, hp, np.random.default_rng(1)),
                          rl.ddpg_targets(ddpg, batch, hp))


def test_td3_target_is_below_each_single_critic(rng):
    td3 = rl.build_agent_params(C.ALGO_TD3, SPEC, hidden=8, seed=4)
    batch = _batch(rng, n=32)
    hp = HyperParams(target_noise=0.0)
    y = rl.td3_targets(td3, batch, hp, np.random.default_rng(0))
    for critic in td3.target_critics:
        single = rl.AgentParams(C.ALGO_DDPG, SPEC, td3.actor, (critic,), td3.target_actor, (critic,))
        assert np.all(y <= rl.ddpg_targets(single, batch, hp))


def test_ddpg_update_overfits_one_batch(rng):
    agent = Agent.create(C.ALGO_DDPG, SPEC, dataclasses.replace(SMALL, gamma=0.0))
    batch = _batch(rng, n=16)
    losses = [agent.update(batch)[0] for _ in range(100)]
    assert losses[-1] < losses[0]
    assert agent.updates == 100
    assert agent.actor_opt.t == 100 and agent.critic_opts[0].t == 100


def test_ddpg_targets_follow_polyak(rng):
    agent = Agent.create(C.ALGO_DDPG, SPEC, SMALL)
    before = agent.params
    rl.ddpg_update(agent, _batch(rng))
    after = agent.params
    expected = rl.polyak_update(before.target_actor, after.actor, SMALL.tau)
    assert after.target_actor.same_as(expected)
    assert not after.target_actor.same_as(after.actor)


def test_td3_policy_delay(rng):
    agent = Agent.create(C.ALGO_TD3, SPEC, SMALL)
    batch = _batch(rng)
    critic_loss, actor_loss = agent.update(batch)
    assert actor_loss is not None and np.isfinite(critic_loss)
    before = agent.params
    critic_loss, actor_loss = agent.update(batch)
    assert actor_loss is None
    assert agent.params.actor.same_as(before.actor)
    assert agent.params.target_actor.same_as(before.target_actor)
    assert all(a.same_as(b) for a, b in zip(agent.params.target_critics, before.target_critics))
    assert not agent.params.critics[0].same_as(before.critics[0])


def test_update_rejects_non_finite_values():
    agent = Agent.create(C.ALGO_DDPG, SPEC, SMALL)
    bad = np.full(15, np.nan)
    batch = TransitionBatch.of([Transition(bad, np.zeros(4), 0.5, bad, False)] * 4)
    with pytest.raises(NonFiniteError):
        agent.update(batch)


def test_polyak_examples():
    net = nn.build_network([nn.LayerSpec.dense(2, 2)], (2,), seed=0)
    zeros = net.with_arrays([np.zeros((2, 2))], [np.zeros(2)])
    twos = net.with_arrays([np.full((2, 2), 2.0)], [np.full(2, 2.0)])
    assert rl.polyak_update(zeros, twos, 1.0).same_as(twos)
    half = rl.polyak_update(zeros, twos, 0.5)
    assert np.all(half.weights[0] == 1.0) and np.all(half.biases[0] == 1.0)
    with pytest.raises(ShapeError):
        rl.polyak_update(zeros, nn.build_network([nn.LayerSpec.dense(2, 3)], (2,)), 0.5)
    with pytest.raises(ConfigError):
        rl.polyak_update(zeros, twos, 0.0)


def test_polyak_decays_geometrically():
    online = nn.build_network([nn.LayerSpec.dense(3, 2)], (3,), seed=1)
    target = nn.build_network([nn.LayerSpec.dense(3, 2)], (3,), seed=2)

    def gap(t):
        return np.sqrt(sum(np.sum((a - b) ** 2) for a, b in zip(t.arrays(), online.arrays())))

    previous = gap(target)
    for _ in range(10):
        target = rl.polyak_update(target, online, 0.1)
        assert gap(target) == pytest.approx(0.9 * previous, rel=1e-9)
        previous = gap(target)


@pytest.mark.parametrize("algorithm", [C.ALGO_DDPG, C.ALGO_TD3])
def test_policy_file_round_trip(tmp_path, rng, algorithm):
    agent = Agent.create(algorithm, RewardWindow(15, (32, 24)), SMALL)
    agent.update(_batch(rng))
    path = rl.save_policy(tmp_path / "policy.rwpl", agent)
    back = rl.load_policy(path)
    assert back.same_as(agent.snapshot())
    assert back.spec == RewardWindow(15, (32, 24))
    state = rng.random(15)
    assert np.array_equal(rl.select_action(back, state), rl.select_action(agent, state))


def test_policy_file_unknown_algorithm():
    data = rl.policy_to_bytes(rl.build_agent_params(C.ALGO_DDPG, SPEC, hidden=4))
    with pytest.raises(FormatError):
        rl.policy_from_bytes(data[:6] + b"\x07" + data[7:])
