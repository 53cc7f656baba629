#############################
#  RewardWin - Actor-Critic Learners
#
#  DDPG and TD3 on top of nncore, with a ring
#  replay buffer, target networks and Gaussian
#  exploration noise.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import constants as C
from . import nncore as nn
from .nncore import AdamState, LayerSpec, NetworkParams
from .preferences import format_preferences, read_preferences, to_float, to_int
from .rewardwin_common import (BinaryReader, BinaryWriter, ConfigError, DataError, FormatError,
                               NonFiniteError, ShapeError, UsageError, derive_seed, make_rng,
                               read_bytes, write_atomically)
from .staterepr import StateSpec

log = logging.getLogger(__name__)

ACTION_DIM = C.N_JOINTS


@dataclass(frozen=True)
class HyperParams:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 64
    buffer_capacity: int = 100000
    warmup_steps: int = 1000
    expl_noise: float = 0.1
    policy_delay: int = 2
    target_noise: float = 0.2
    noise_clip: float = 0.5
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must be in [0, 1], got %r" % self.gamma)
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError("tau must be in (0, 1], got %r" % self.tau)
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.hidden < 1:
            raise ConfigError("batch_size, buffer_capacity and hidden must be >= 1")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.policy_delay < 1:
            raise ConfigError("policy_delay must be >= 1, got %r" % self.policy_delay)
        if min(self.expl_noise, self.target_noise, self.noise_clip) < 0:
            raise ConfigError("noise scales must be >= 0")

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in dataclasses.fields(cls))

    @classmethod
    def from_preferences(cls, values: Mapping[str, str], base: Optional["HyperParams"] = None) -> "HyperParams":
        base = base or cls()
        changes = {}
        for key, raw in values.items():
            if key not in cls.keys():
                raise ConfigError("unknown hyperparameter %r" % key)
            if isinstance(getattr(base, key), int):
                changes[key] = to_int(key, raw)
            else:
                changes[key] = to_float(key, raw)
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "HyperParams":
        return cls.from_preferences(read_preferences(path, cls.keys()))

    def to_preferences(self) -> str:
        return format_preferences(dataclasses.asdict(self), "hyperparameters")


@dataclass(frozen=True, eq=False)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise DataError("transition reward %r outside [0, 1]" % self.reward)
        if np.shape(self.state) != np.shape(self.next_state):
            raise ShapeError("state %r and next_state %r differ in shape"
                             % (np.shape(self.state), np.shape(self.next_state)))


@dataclass(frozen=True, eq=False)
class TransitionBatch:
    states: np.ndarray        # (B, d)
    actions: np.ndarray       # (B, 4)
    rewards: np.ndarray       # (B,)
    next_states: np.ndarray   # (B, d)
    dones: np.ndarray         # (B,) 0.0 / 1.0

    @classmethod
    def of(cls, transitions: Sequence[Transition]) -> "TransitionBatch":
        if not transitions:
            raise DataError("empty batch")
        return cls(np.stack([t.state for t in transitions]).astype(np.float64),
                   np.stack([t.action for t in transitions]).astype(np.float64),
                   np.array([t.reward for t in transitions], dtype=np.float64),
                   np.stack([t.next_state for t in transitions]).astype(np.float64),
                   np.array([1.0 if t.done else 0.0 for t in transitions]))

    def __len__(self) -> int:
        return int(self.rewards.shape[0])


class ReplayBuffer:
    """
    Fixed-capacity ring of transitions. Once full the oldest entry is
    overwritten; sampling is uniform with replacement from a seeded stream.
    """

    def __init__(self, capacity: int = 100000, seed: int = 0):
        if capacity < 1:
            raise ConfigError("buffer capacity must be >= 1, got %r" % capacity)
        self.capacity = int(capacity)
        self._items: List[Transition] = []
        self._cursor = 0
        self.rng = make_rng(seed, "buffer")

    def __len__(self) -> int:
        return len(self._items)

    def push(self, transition: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._cursor] = transition
        self._cursor = (self._cursor + 1) % self.capacity

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if batch_size < 1 or len(self._items) < batch_size:
            raise UsageError("cannot sample %d transitions from a buffer holding %d"
                             % (batch_size, len(self._items)))
        return self.rng.integers(0, len(self._items), size=batch_size)

    def sample(self, batch_size: int) -> TransitionBatch:
        return TransitionBatch.of([self._items[i] for i in self.sample_indices(batch_size)])

    def ordered(self) -> List[Transition]:
        # oldest first
        if len(self._items) < self.capacity:
            return list(self._items)
        return self._items[self._cursor:] + self._items[:self._cursor]


def buffer_push(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.push(transition)


def buffer_sample(buffer: ReplayBuffer, batch_size: int) -> TransitionBatch:
    return buffer.sample(batch_size)


def actor_layers(state_dim: int, hidden: int = 64) -> List[LayerSpec]:
    return [LayerSpec.dense(state_dim, hidden), LayerSpec.relu(),
            LayerSpec.dense(hidden, hidden), LayerSpec.relu(),
            LayerSpec.dense(hidden, ACTION_DIM), LayerSpec.tanh()]


def critic_layers(state_dim: int, hidden: int = 64) -> List[LayerSpec]:
    return [LayerSpec.dense(state_dim + ACTION_DIM, hidden), LayerSpec.relu(),
            LayerSpec.dense(hidden, hidden), LayerSpec.relu(),
            LayerSpec.dense(hidden, 1)]


@dataclass(frozen=True, eq=False)
class AgentParams:
    algorithm: str
    spec: StateSpec
    actor: NetworkParams
    critics: Tuple[NetworkParams, ...]
    target_actor: NetworkParams
    target_critics: Tuple[NetworkParams, ...]

    def __post_init__(self):
        if self.algorithm not in C.ALGO_TAGS:
            raise ConfigError("unknown algorithm %r" % self.algorithm)
        want = 2 if self.algorithm == C.ALGO_TD3 else 1
        if len(self.critics) != want or len(self.target_critics) != want:
            raise ShapeError("%s needs %d critic(s), got %d" % (self.algorithm, want, len(self.critics)))
        for online, target in zip((self.actor,) + self.critics, (self.target_actor,) + self.target_critics):
            if online.layers != target.layers:
                raise ShapeError("target network layout differs from its online network")

    @property
    def state_dim(self) -> int:
        return self.actor.input_shape[0]

    def networks(self) -> Tuple[NetworkParams, ...]:
        # file order: actor, critics, target actor, target critics
        return (self.actor,) + self.critics + (self.target_actor,) + self.target_critics

    def same_as(self, other: "AgentParams") -> bool:
        return (self.algorithm == other.algorithm and str(self.spec) == str(other.spec)
                and all(a.same_as(b) for a, b in zip(self.networks(), other.networks())))


def build_agent_params(algorithm: str, spec: StateSpec, hidden: int = 64, seed: int = 0) -> AgentParams:
    dim = spec.dimension
    n_critics = 2 if algorithm == C.ALGO_TD3 else 1
    actor = nn.build_network(actor_layers(dim, hidden), (dim,), derive_seed(seed, "actor"))
    critics = tuple(nn.build_network(critic_layers(dim, hidden), (dim + ACTION_DIM,),
                                     derive_seed(seed, "critic", i)) for i in range(n_critics))
    return AgentParams(algorithm, spec, actor, critics, actor, critics)


class Agent:
    """
    The learner's mutable handle: current AgentParams, their optimizer states,
    hyperparameters and the noise streams. snapshot() hands out the immutable
    parameters for evaluation or saving.
    """

    def __init__(self, params: AgentParams, hp: HyperParams):
        self.params = params
        self.hp = hp
        self.actor_opt = AdamState.create(params.actor, hp.actor_lr)
        self.critic_opts = tuple(AdamState.create(c, hp.critic_lr) for c in params.critics)
        self.rng = make_rng(hp.seed, "exploration")
        self.target_rng = make_rng(hp.seed, "target-noise")
        self.updates = 0

    @classmethod
    def create(cls, algorithm: str, spec: StateSpec, hp: HyperParams) -> "Agent":
        return cls(build_agent_params(algorithm, spec, hp.hidden, hp.seed), hp)

    @property
    def algorithm(self) -> str:
        return self.params.algorithm

    @property
    def spec(self) -> StateSpec:
        return self.params.spec

    def snapshot(self) -> AgentParams:
        return self.params

    def update(self, batch: TransitionBatch) -> Tuple[float, Optional[float]]:
        if self.algorithm == C.ALGO_TD3:
            out = td3_update(self, batch, self.hp, self.updates)
        else:
            out = ddpg_update(self, batch, self.hp)
        self.updates += 1
        return out


def _policy_output(params: AgentParams, states: np.ndarray) -> np.ndarray:
    return nn.forward(params.actor, states)[0]


def select_action(agent: Union[Agent, AgentParams], state: np.ndarray, explore: bool = False,
                  rng: Optional[np.random.Generator] = None, warmup: bool = False,
                  sigma: Optional[float] = None) -> np.ndarray:
    params = agent.snapshot() if isinstance(agent, Agent) else agent
    state = np.asarray(state, dtype=np.float64).reshape(-1)
    if state.shape[0] != params.state_dim:
        raise ShapeError("state has %d entries, %s expects %d" % (state.shape[0], params.spec, params.state_dim))
    if rng is None:
        if not isinstance(agent, Agent) and (explore or warmup):
            raise UsageError("exploration without an Agent needs an explicit rng")
        rng = agent.rng if isinstance(agent, Agent) else None
    if warmup:
        return rng.uniform(-1.0, 1.0, size=ACTION_DIM)
    action = _policy_output(params, state[None, :])[0]
    if explore:
        if sigma is None:
            sigma = agent.hp.expl_noise if isinstance(agent, Agent) else HyperParams.expl_noise
        action = np.clip(action + rng.normal(0.0, sigma, size=ACTION_DIM), -1.0, 1.0)
    return action


def _q(critic: NetworkParams, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return nn.forward(critic, np.hstack([states, actions]))[0][:, 0]


def ddpg_targets(params: AgentParams, batch: TransitionBatch, hp: HyperParams) -> np.ndarray:
    """y = r + gamma * (1 - done) * Q'(s', mu'(s'))."""
    next_actions = _policy_output_target(params, batch.next_states)
    bootstrap = _q(params.target_critics[0], batch.next_states, next_actions)
    return batch.rewards + hp.gamma * (1.0 - batch.dones) * bootstrap


def _policy_output_target(params: AgentParams, states: np.ndarray) -> np.ndarray:
    return nn.forward(params.target_actor, states)[0]


def td3_targets(params: AgentParams, batch: TransitionBatch, hp: HyperParams,
                rng: np.random.Generator) -> np.ndarray:
    """Smoothed target action, then the smaller of the two target critics."""
    mu = _policy_output_target(params, batch.next_states)
    noise = np.clip(rng.normal(0.0, hp.target_noise, size=mu.shape), -hp.noise_clip, hp.noise_clip)
    smoothed = np.clip(mu + noise, -1.0, 1.0)
    q1 = _q(params.target_critics[0], batch.next_states, smoothed)
    q2 = _q(params.target_critics[1], batch.next_states, smoothed)
    return batch.rewards + hp.gamma * (1.0 - batch.dones) * np.minimum(q1, q2)


def _check_loss(what: str, loss: float, agent: Agent) -> None:
    if not np.isfinite(loss):
        raise NonFiniteError("%s loss is %r at update %d (%s, %s)"
                             % (what, loss, agent.updates, agent.algorithm, agent.spec))


def _critic_step(critic: NetworkParams, opt: AdamState, batch: TransitionBatch,
                 y: np.ndarray) -> Tuple[NetworkParams, AdamState, float]:
    q, tape = nn.forward(critic, np.hstack([batch.states, batch.actions]))
    diff = q[:, 0] - y
    loss = float(np.mean(diff * diff))
    grad = (2.0 / diff.shape[0]) * diff[:, None]
    critic, opt = nn.adam_step(critic, nn.backward(critic, tape, grad), opt)
    return critic, opt, loss


def _actor_step(actor: NetworkParams, opt: AdamState, critic: NetworkParams,
                states: np.ndarray) -> Tuple[NetworkParams, AdamState, float]:
    # ascend Q(s, mu(s)): the action gradient comes back through the critic's input
    actions, actor_tape = nn.forward(actor, states)
    q, critic_tape = nn.forward(critic, np.hstack([states, actions]))
    loss = float(-np.mean(q))
    grad_q = np.full_like(q, -1.0 / q.shape[0])
    _, grad_in = nn.backward_with_input(critic, critic_tape, grad_q)
    grads = nn.backward(actor, actor_tape, grad_in[:, states.shape[1]:])
    actor, opt = nn.adam_step(actor, grads, opt)
    return actor, opt, loss


def polyak_update(target: NetworkParams, online: NetworkParams, tau: float) -> NetworkParams:
    if not 0.0 < tau <= 1.0:
        raise ConfigError("tau must be in (0, 1], got %r" % tau)
    if target.layers != online.layers or target.input_shape != online.input_shape:
        raise ShapeError("target and online networks differ in layout")
    weights, biases = [], []
    for tw, tb, w, b in zip(target.weights, target.biases, online.weights, online.biases):
        if w is None:
            weights.append(None)
            biases.append(None)
            continue
        if tw.shape != w.shape or tb.shape != b.shape:
            raise ShapeError("parameter shape %r vs %r" % (tw.shape, w.shape))
        weights.append(tau * w + (1.0 - tau) * tw)
        biases.append(tau * b + (1.0 - tau) * tb)
    return target.with_arrays(weights, biases)


def _soft_update_all(params: AgentParams, tau: float) -> AgentParams:
    return dataclasses.replace(
        params,
        target_actor=polyak_update(params.target_actor, params.actor, tau),
        target_critics=tuple(polyak_update(t, o, tau) for t, o in zip(params.target_critics, params.critics)))


def ddpg_update(agent: Agent, batch: TransitionBatch, hp: Optional[HyperParams] = None) -> Tuple[float, float]:
    hp = hp or agent.hp
    if len(batch) == 0:
        raise DataError("empty batch")
    params = agent.params
    y = ddpg_targets(params, batch, hp)
    critic, critic_opt, critic_loss = _critic_step(params.critics[0], agent.critic_opts[0], batch, y)
    _check_loss("critic", critic_loss, agent)
    actor, actor_opt, actor_loss = _actor_step(params.actor, agent.actor_opt, critic, batch.states)
    _check_loss("actor", actor_loss, agent)
    params = dataclasses.replace(params, actor=actor, critics=(critic,))
    agent.params = _soft_update_all(params, hp.tau)
    agent.critic_opts = (critic_opt,)
    agent.actor_opt = actor_opt
    return critic_loss, actor_loss


def td3_update(agent: Agent, batch: TransitionBatch, hp: Optional[HyperParams] = None,
               update_index: int = 0) -> Tuple[float, Optional[float]]:
    hp = hp or agent.hp
    if len(batch) == 0:
        raise DataError("empty batch")
    params = agent.params
    if len(params.critics) != 2:
        raise ShapeError("td3 needs two critics")
    y = td3_targets(params, batch, hp, agent.target_rng)
    critics, opts, losses = [], [], []
    for critic, opt in zip(params.critics, agent.critic_opts):
        critic, opt, loss = _critic_step(critic, opt, batch, y)
        critics.append(critic)
        opts.append(opt)
        losses.append(loss)
    critic_loss = float(np.mean(losses))
    _check_loss("critic", critic_loss, agent)
    params = dataclasses.replace(params, critics=tuple(critics))
    agent.critic_opts = tuple(opts)

    actor_loss = None
    if update_index % hp.policy_delay == 0:
        actor, agent.actor_opt, actor_loss = _actor_step(params.actor, agent.actor_opt,
                                                         params.critics[0], batch.states)
        _check_loss("actor", actor_loss, agent)
        params = _soft_update_all(dataclasses.replace(params, actor=actor), hp.tau)
    agent.params = params
    return critic_loss, actor_loss


def policy_to_bytes(params: AgentParams) -> bytes:
    w = BinaryWriter()
    w.raw(C.POLICY_MAGIC).pack("HB", C.POLICY_VERSION, C.ALGO_TAGS[params.algorithm])
    w.text(str(params.spec))
    for net in params.networks():
        nn.write_network(w, net)
    return w.getvalue()


def policy_from_bytes(data: bytes, what: str = "policy") -> AgentParams:
    r = BinaryReader(data, what)
    r.expect_magic(C.POLICY_MAGIC)
    r.expect_version(C.POLICY_VERSION)
    tag = r.unpack("B")
    algorithms = {v: k for k, v in C.ALGO_TAGS.items()}
    if tag not in algorithms:
        raise FormatError("%s: unknown algorithm tag %d" % (what, tag))
    algorithm = algorithms[tag]
    spec = StateSpec.parse(r.text())
    n_critics = 2 if algorithm == C.ALGO_TD3 else 1
    nets = [nn.read_network(r) for _ in range(2 * (1 + n_critics))]
    r.expect_end()
    half = 1 + n_critics
    return AgentParams(algorithm, spec, nets[0], tuple(nets[1:half]), nets[half], tuple(nets[half + 1:]))


def save_policy(path: Union[str, Path], params: Union[Agent, AgentParams]) -> Path:
    if isinstance(params, Agent):
        params = params.snapshot()
    return write_atomically(path, policy_to_bytes(params))


def load_policy(path: Union[str, Path]) -> AgentParams:
    return policy_from_bytes(read_bytes(path), str(path))
