#############################
#  RewardWin - Experiment Harness
#
#  Episode loop, policy training and evaluation,
#  and the representation x algorithm x seed
#  comparison grid with its result files.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import constants as C
from . import rewardmodel, simenv
from .preferences import (format_preferences, read_preferences, to_int)
from .rewardmodel import ClassifierParams
from .rewardwin_common import (ConfigError, DataError, NonFiniteError, RewardWinError, derive_seed,
                               make_rng, run_info, write_atomically)
from .rlalgos import Agent, AgentParams, HyperParams, ReplayBuffer, Transition, select_action
from .simenv import EnvConfig, Environment, WorldState
from .staterepr import (PcaBasis, PcaImage, Pixels, RewardWindow, RewardWindowBuffer, StateSpec,
                        downsample, encode, load_pca)

log = logging.getLogger(__name__)

# state vector, world state -> action
Policy = Callable[[np.ndarray, WorldState], np.ndarray]

ENV_PREFIX = "env."
HP_PREFIX = "hp."


@dataclass(frozen=True)
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    classifier_path: Optional[str] = None
    pca_path: Optional[str] = None
    spec: str = "rewards:15"
    algorithm: str = C.ALGO_DDPG
    hp: HyperParams = field(default_factory=HyperParams)
    train_steps: int = C.TRAIN_STEPS
    eval_steps: int = C.EVAL_STEPS
    n_seeds: int = C.N_SEEDS
    seed: int = 0
    out_dir: str = "runs"
    workers: int = 1
    specs: Tuple[str, ...] = ("pixels:32x24", "pixels:16x12", "pixels:8x6", "pca:50", "rewards:15")
    algorithms: Tuple[str, ...] = (C.ALGO_DDPG, C.ALGO_TD3)

    def __post_init__(self):
        if self.train_steps < 1 or self.eval_steps < 1:
            raise ConfigError("train_steps and eval_steps must be >= 1")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1, got %r" % self.n_seeds)
        for algo in self.algorithms + (self.algorithm,):
            if algo not in C.ALGO_TAGS:
                raise ConfigError("unknown algorithm %r (ddpg or td3)" % algo)
        for text in self.specs + (self.spec,):
            StateSpec.parse(text)

    @property
    def state_spec(self) -> StateSpec:
        return StateSpec.parse(self.spec)

    @classmethod
    def own_keys(cls) -> Tuple[str, ...]:
        return ("env_config", "classifier", "pca", "spec", "algorithm", "train_steps", "eval_steps",
                "n_seeds", "seed", "out_dir", "workers", "specs", "algorithms")

    @classmethod
    def keys(cls) -> Tuple[str, ...]:
        return (cls.own_keys() + tuple(ENV_PREFIX + k for k in EnvConfig.keys())
                + tuple(HP_PREFIX + k for k in HyperParams.keys()))

    @classmethod
    def from_preferences(cls, values: Mapping[str, str], base: Optional["ExperimentConfig"] = None,
                         base_dir: Union[str, Path, None] = None) -> "ExperimentConfig":
        """
        Build from key=value pairs. env.* and hp.* keys address EnvConfig and
        HyperParams fields; env_config names a whole environment file. Relative
        paths resolve against base_dir (the config file's directory).
        """
        base = base or cls()

        def path_of(raw: str) -> Optional[str]:
            if not raw:
                return None
            p = Path(raw).expanduser()
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            return str(p)

        env = base.env
        if "env_config" in values:
            env = EnvConfig.load(path_of(values["env_config"]))
        env_values = {k[len(ENV_PREFIX):]: v for k, v in values.items() if k.startswith(ENV_PREFIX)}
        hp_values = {k[len(HP_PREFIX):]: v for k, v in values.items() if k.startswith(HP_PREFIX)}
        changes: Dict[str, object] = {
            "env": EnvConfig.from_preferences(env_values, env),
            "hp": HyperParams.from_preferences(hp_values, base.hp),
        }
        for key, raw in values.items():
            if key.startswith(ENV_PREFIX) or key.startswith(HP_PREFIX) or key == "env_config":
                continue
            if key not in cls.own_keys():
                raise ConfigError("unknown experiment key %r" % key)
            if key in ("train_steps", "eval_steps", "n_seeds", "seed", "workers"):
                changes[key] = to_int(key, raw)
            elif key == "classifier":
                changes["classifier_path"] = path_of(raw)
            elif key == "pca":
                changes["pca_path"] = path_of(raw)
            elif key == "out_dir":
                changes[key] = path_of(raw)
            elif key in ("specs", "algorithms"):
                changes[key] = tuple(s.strip() for s in raw.split(",") if s.strip())
            else:
                changes[key] = raw
        return dataclasses.replace(base, **changes)

    @classmethod
    def load(cls, path: Union[str, Path], overrides: Optional[Mapping[str, str]] = None) -> "ExperimentConfig":
        values = read_preferences(path, cls.keys())
        values.update(overrides or {})
        return cls.from_preferences(values, base_dir=Path(path).parent)

    def to_preferences(self) -> str:
        values: Dict[str, object] = {
            "classifier": self.classifier_path or "",
            "pca": self.pca_path or "",
            "spec": self.spec, "algorithm": self.algorithm,
            "train_steps": self.train_steps, "eval_steps": self.eval_steps,
            "n_seeds": self.n_seeds, "seed": self.seed, "out_dir": self.out_dir,
            "workers": self.workers, "specs": ", ".join(self.specs),
            "algorithms": ", ".join(self.algorithms),
        }
        values.update((ENV_PREFIX + k, v) for k, v in dataclasses.asdict(self.env).items())
        values.update((HP_PREFIX + k, v) for k, v in dataclasses.asdict(self.hp).items())
        return format_preferences(values, "experiment")


@dataclass(frozen=True, eq=False)
class Components:
    """Everything one episode loop needs besides the policy."""
    env: EnvConfig                 # with the camera resolution every consumer can be fed from
    classifier: ClassifierParams
    spec: StateSpec
    basis: Optional[PcaBasis] = None

    def reward(self, observation: np.ndarray) -> float:
        return rewardmodel.predict_success(self.classifier, downsample(observation, *self.classifier.resolution))

    def new_window(self) -> Optional[RewardWindowBuffer]:
        return RewardWindowBuffer(self.spec.n) if isinstance(self.spec, RewardWindow) else None

    def encode(self, observation: np.ndarray, window: Optional[RewardWindowBuffer]) -> np.ndarray:
        return encode(self.spec, observation, window, self.basis)


def camera_resolution(resolutions: Sequence[Tuple[int, int]]) -> Tuple[int, int]:
    best = max(resolutions, key=lambda r: r[0] * r[1])
    for r in resolutions:
        if best[0] % r[0] or best[1] % r[1]:
            raise ConfigError("resolution %dx%d does not divide the camera resolution %dx%d"
                              % (r[0], r[1], best[0], best[1]))
    return best


def make_components(env: EnvConfig, classifier: ClassifierParams, spec: Union[StateSpec, str],
                    basis: Optional[PcaBasis] = None) -> Components:
    if isinstance(spec, str):
        spec = StateSpec.parse(spec)
    wanted = [tuple(env.resolution), tuple(classifier.resolution)]
    if isinstance(spec, Pixels):
        wanted.append((spec.width, spec.height))
    elif isinstance(spec, PcaImage):
        if basis is None:
            raise ConfigError("%s needs a fitted pca basis (fit-pca, then pca = <file>)" % spec)
        if basis.k != spec.k:
            raise ConfigError("%s does not match the basis, which has %d components" % (spec, basis.k))
        if basis.resolution is None:
            raise ConfigError("pca basis of dimension %d has no known image resolution" % basis.dim)
        wanted.append(tuple(basis.resolution))
    elif isinstance(spec, RewardWindow) and spec.resolution and tuple(spec.resolution) != tuple(classifier.resolution):
        raise ConfigError("%s expects rewards from %dx%d images, the classifier takes %dx%d"
                          % ((spec,) + tuple(spec.resolution) + tuple(classifier.resolution)))
    return Components(env.with_resolution(*camera_resolution(wanted)), classifier, spec, basis)


def load_components(config: ExperimentConfig, spec: Optional[str] = None) -> Components:
    if not config.classifier_path:
        raise ConfigError("no classifier given (classifier = <file> or --set classifier=<file>)")
    if not os.path.exists(config.classifier_path):
        raise ConfigError("classifier file %s does not exist" % config.classifier_path)
    classifier = rewardmodel.load_classifier(config.classifier_path)
    state_spec = StateSpec.parse(spec or config.spec)
    basis = None
    if isinstance(state_spec, PcaImage):
        if not config.pca_path or not os.path.exists(config.pca_path):
            raise ConfigError("%s needs an existing pca file, got %r" % (state_spec, config.pca_path))
        basis = load_pca(config.pca_path, state_spec.resolution)
    return make_components(config.env, classifier, state_spec, basis)


@dataclass(frozen=True, eq=False)
class EpisodeResult:
    transitions: Tuple[Transition, ...]
    rewards: Tuple[float, ...]      # r0 (reset frame) .. rT
    success: bool
    truncated: bool
    done_reason: str

    @property
    def length(self) -> int:
        return len(self.transitions)

    @property
    def cumulative_reward(self) -> float:
        return float(sum(self.rewards[1:]))

    def record(self, seed: int, index: int, phase: str, **extra) -> dict:
        out = {"phase": phase, "seed": seed, "episode": index, "length": self.length,
               "cumulative_reward": self.cumulative_reward, "success": self.success,
               "truncated": self.truncated, "done_reason": self.done_reason,
               "rewards": list(self.rewards)}
        out.update(extra)
        return out


def expert_policy(config: EnvConfig) -> Policy:
    return lambda state, world: simenv.scripted_expert(world, config)


def random_policy(rng: np.random.Generator) -> Policy:
    return lambda state, world: rng.uniform(-1.0, 1.0, size=C.N_JOINTS)


def agent_policy(agent: Union[Agent, AgentParams], explore: bool = False,
                 rng: Optional[np.random.Generator] = None) -> Policy:
    return lambda state, world: select_action(agent, state, explore, rng)


def run_episode(components: Components, policy: Policy, episode_seed: int,
                step_budget: Optional[int] = None,
                on_transition: Optional[Callable[[Transition], None]] = None) -> EpisodeResult:
    """
    One attempt at the task: render, score, push the score into the reward
    window, encode, act, step. The reward of the reset frame is pushed too,
    so the first state already holds one score. Ends on ground-truth success,
    at the episode cap, or when step_budget runs out (truncated).
    """
    env = Environment(components.env)
    window = components.new_window()
    obs = env.reset(episode_seed)
    reward = components.reward(obs)
    if window is not None:
        window.push(reward)
    state = components.encode(obs, window)
    rewards = [reward]
    transitions: List[Transition] = []
    result = None
    while step_budget is None or len(transitions) < step_budget:
        action = np.clip(np.asarray(policy(state, env.state), dtype=np.float64), -1.0, 1.0)
        result = env.step(action)
        reward = components.reward(result.observation)
        if window is not None:
            window.push(reward)
        next_state = components.encode(result.observation, window)
        t = Transition(state, action, reward, next_state, result.done)
        transitions.append(t)
        rewards.append(reward)
        if on_transition is not None:
            on_transition(t)
        state = next_state
        if result.done:
            break
    done = result is not None and result.done
    return EpisodeResult(tuple(transitions), tuple(rewards),
                         bool(done and result.ground_truth_success), not done,
                         result.done_reason if result is not None else C.DONE_RUNNING)


@dataclass(frozen=True, eq=False)
class EvalMetrics:
    avg_reward: float
    task_success_pct: float
    episodes: int
    logs: Tuple[dict, ...] = ()

    @classmethod
    def from_records(cls, records: Sequence[dict]) -> "EvalMetrics":
        done = [r for r in records if not r["truncated"]]
        if not done:
            raise DataError("no completed evaluation episode; raise eval_steps")
        avg = float(np.mean([r["cumulative_reward"] for r in done]))
        pct = 100.0 * sum(1 for r in done if r["success"]) / len(done)
        return cls(avg, pct, len(done), tuple(records))

    def same_numbers(self, other: "EvalMetrics") -> bool:
        return (self.avg_reward == other.avg_reward and self.task_success_pct == other.task_success_pct
                and self.episodes == other.episodes)


def evaluate_controller(components: Components, policy: Policy, eval_steps: int, seed: int,
                        phase: str = "eval") -> EvalMetrics:
    """Run episodes until eval_steps env steps are spent; the cut-off last one is not scored."""
    records, steps, index = [], 0, 0
    while steps < eval_steps:
        ep = run_episode(components, policy, derive_seed(seed, phase, index), eval_steps - steps)
        steps += ep.length
        records.append(ep.record(seed, index, phase))
        index += 1
    metrics = EvalMetrics.from_records(records)
    log.info("%s seed %d: %d episodes, success %.2f%%, avg reward %.4f",
             phase, seed, metrics.episodes, metrics.task_success_pct, metrics.avg_reward)
    return metrics


def evaluate_policy(agent: Union[Agent, AgentParams], config: ExperimentConfig, seed: int,
                    components: Optional[Components] = None) -> EvalMetrics:
    params = agent.snapshot() if isinstance(agent, Agent) else agent
    components = components or load_components(config, str(params.spec))
    if str(params.spec) != str(components.spec):
        raise ConfigError("policy was trained on %s, evaluation uses %s" % (params.spec, components.spec))
    return evaluate_controller(components, agent_policy(params), config.eval_steps, seed)


def evaluate_random(config: ExperimentConfig, seed: int, components: Optional[Components] = None) -> EvalMetrics:
    components = components or load_components(config)
    return evaluate_controller(components, random_policy(make_rng(seed, "random-policy")),
                               config.eval_steps, seed, "random")


def write_jsonl(path: Union[str, Path], records: Sequence[dict]) -> Path:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    return write_atomically(path, text.encode("utf-8"))


def read_jsonl(path: Union[str, Path]) -> List[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def train_policy(config: ExperimentConfig, seed: int, components: Optional[Components] = None,
                 log_path: Union[str, Path, None] = None) -> Tuple[AgentParams, List[dict]]:
    """
    Train for exactly train_steps env steps, one gradient update per step once
    warmup is over. Returns the final parameters and one record per completed
    episode; the last episode is cut at the budget and only logged.
    """
    components = components or load_components(config)
    hp = dataclasses.replace(config.hp, seed=seed)
    agent = Agent.create(config.algorithm, components.spec, hp)
    buffer = ReplayBuffer(hp.buffer_capacity, derive_seed(seed, "buffer"))
    records: List[dict] = []
    steps = 0

    def learn(t: Transition) -> None:
        nonlocal steps
        buffer.push(t)
        steps += 1
        if steps > hp.warmup_steps and len(buffer) >= hp.batch_size:
            agent.update(buffer.sample(hp.batch_size))

    def act(state: np.ndarray, world: WorldState) -> np.ndarray:
        return select_action(agent, state, explore=True, warmup=steps < hp.warmup_steps)

    index = 0
    try:
        while steps < config.train_steps:
            ep = run_episode(components, act, derive_seed(seed, "train", index),
                             config.train_steps - steps, learn)
            records.append(ep.record(seed, index, "train", algorithm=config.algorithm,
                                     spec=str(components.spec)))
            if not ep.truncated:
                log.debug("train %s %s seed %d ep %d: len %d, reward %.3f, success %s", config.algorithm,
                          components.spec, seed, index, ep.length, ep.cumulative_reward, ep.success)
            index += 1
    except NonFiniteError:
        log.error("training %s on %s (seed %d) diverged after %d steps", config.algorithm,
                  components.spec, seed, steps)
        if log_path is not None:
            write_jsonl(log_path, records)
        raise
    if log_path is not None:
        write_jsonl(log_path, records)
    curve = [r for r in records if not r["truncated"]]
    wins = sum(1 for r in curve[-20:] if r["success"])
    log.info("trained %s on %s seed %d: %d steps, %d episodes, last-20 success %d",
             config.algorithm, components.spec, seed, steps, len(curve), wins)
    return agent.snapshot(), curve


@dataclass(frozen=True)
class CellResult:
    spec: str
    algorithm: str
    seed: int
    avg_reward: Optional[float]
    task_success_pct: Optional[float]
    episodes: Optional[int]
    train_steps: int
    error: str = ""

    def row(self) -> dict:
        return {"spec": self.spec, "algorithm": self.algorithm, "seed": self.seed,
                "avg_reward": "" if self.avg_reward is None else repr(self.avg_reward),
                "task_success_pct": "" if self.task_success_pct is None else repr(self.task_success_pct),
                "episodes": "" if self.episodes is None else self.episodes,
                "train_steps": self.train_steps}


def _cell_job(args) -> Tuple[CellResult, List[dict]]:
    config, components, algorithm, seed = args
    spec = str(components.spec)
    cell = dataclasses.replace(config, algorithm=algorithm, spec=spec)
    try:
        params, _ = train_policy(cell, seed, components)
        metrics = evaluate_policy(params, cell, derive_seed(seed, "eval"), components)
    except RewardWinError as e:
        log.error("cell %s/%s/%d failed: %s", spec, algorithm, seed, e)
        return CellResult(spec, algorithm, seed, None, None, None, cell.train_steps, str(e)), []
    logs = [dict(r, algorithm=algorithm, spec=spec, cell_seed=seed) for r in metrics.logs]
    return CellResult(spec, algorithm, seed, metrics.avg_reward, metrics.task_success_pct,
                      metrics.episodes, cell.train_steps), logs


def compare_representations(config: ExperimentConfig, specs: Optional[Sequence[str]] = None,
                            seeds: Optional[Sequence[int]] = None,
                            components: Optional[Mapping[str, Components]] = None,
                            out_dir: Union[str, Path, None] = None) -> List[CellResult]:
    """
    Train and evaluate every (spec, algorithm, seed) cell, on a process pool
    when workers > 1. A failing cell is recorded with empty metrics and the
    rest of the grid still runs. Results go to out_dir.
    """
    specs = list(specs or config.specs)
    seeds = list(seeds if seeds is not None else
                 [derive_seed(config.seed, "grid", i) % (2 ** 31) for i in range(config.n_seeds)])
    built = dict(components or {})
    for s in specs:
        if s not in built:
            built[s] = load_components(config, s)
    jobs = [(config, built[s], algo, seed) for s in specs for algo in config.algorithms for seed in seeds]
    log.info("comparing %d specs x %d algorithms x %d seeds on %d worker(s)",
             len(specs), len(config.algorithms), len(seeds), config.workers)
    if config.workers <= 1:
        results = [_cell_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_cell_job, jobs))
    cells = [r for r, _ in results]
    logs = [rec for _, recs in results for rec in recs]
    write_results(out_dir or config.out_dir, cells, logs, config)
    return cells


def _best_and_spread(values: Sequence[float]) -> Tuple[float, float, float]:
    arr = np.array(values, dtype=np.float64)
    return float(arr.max()), float(arr.mean()), float(arr.std())


def format_summary(cells: Sequence[CellResult], algorithms: Sequence[str] = (C.ALGO_DDPG, C.ALGO_TD3)) -> str:
    """Rows are state representations, paired DDPG | TD3 columns for each metric."""
    specs = list(dict.fromkeys(c.spec for c in cells))
    cols = ["%s reward" % a.upper() for a in algorithms] + ["%s success%%" % a.upper() for a in algorithms]
    out = io.StringIO()
    out.write("%-18s %s\n" % ("state", " | ".join("%-26s" % c for c in cols)))
    out.write("-" * (19 + 29 * len(cols)) + "\n")
    for spec in specs:
        parts = []
        for metric in ("avg_reward", "task_success_pct"):
            for algo in algorithms:
                vals = [getattr(c, metric) for c in cells
                        if c.spec == spec and c.algorithm == algo and getattr(c, metric) is not None]
                if vals:
                    best, mean, sd = _best_and_spread(vals)
                    parts.append("%-26s" % ("%.2f (%.2f+-%.2f)" % (best, mean, sd)))
                else:
                    parts.append("%-26s" % "failed")
        out.write("%-18s %s\n" % (spec, " | ".join(parts)))
    out.write("\nbest over seeds, then mean+-sd in parentheses; avg reward is the mean per-episode\n"
              "cumulative predicted reward, success is ground-truth task success over completed episodes\n")
    refs = [(s, C.REFERENCE_SCALE.get(s, s)) for s in specs]
    refs = [(s, full, C.REFERENCE_SUCCESS[full]) for s, full in refs if full in C.REFERENCE_SUCCESS]
    if refs:
        out.write("\nreference task success at full scale (DDPG | TD3):\n")
        for spec, full, (ddpg, td3) in refs:
            label = spec if spec == full else "%s (%s)" % (spec, full.split(":")[1])
            out.write("  %-26s %6.2f | %6.2f\n" % (label, ddpg, td3))
    failed = [c for c in cells if c.error]
    if failed:
        out.write("\nfailed cells:\n")
        for c in failed:
            out.write("  %s %s seed %d: %s\n" % (c.spec, c.algorithm, c.seed, c.error))
    return out.getvalue()


def check_recomputation(cells: Sequence[CellResult], logs: Sequence[dict]) -> None:
    for cell in cells:
        if cell.error:
            continue
        mine = [r for r in logs if r["spec"] == cell.spec and r["algorithm"] == cell.algorithm
                and r["cell_seed"] == cell.seed]
        again = EvalMetrics.from_records(mine)
        if (again.avg_reward, again.task_success_pct, again.episodes) != \
                (cell.avg_reward, cell.task_success_pct, cell.episodes):
            raise RewardWinError("episode log of %s/%s/%d does not reproduce its metrics"
                                 % (cell.spec, cell.algorithm, cell.seed))


def write_results(out_dir: Union[str, Path], cells: Sequence[CellResult], logs: Sequence[dict],
                  config: Optional[ExperimentConfig] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(C.CSV_HEADER), lineterminator="\n")
    writer.writeheader()
    for cell in cells:
        writer.writerow(cell.row())
    write_atomically(out / "results.csv", buf.getvalue().encode("utf-8"))
    algorithms = config.algorithms if config is not None else (C.ALGO_DDPG, C.ALGO_TD3)
    write_atomically(out / "summary.txt", format_summary(cells, algorithms).encode("utf-8"))
    write_jsonl(out / "episodes.jsonl", logs)

    info = run_info()
    info["cells"] = len(cells)
    info["failed"] = [dataclasses.asdict(c) for c in cells if c.error]
    if config is not None:
        info["config"] = config.to_preferences().splitlines()
    # date and cwd would make reruns differ
    info.pop("date", None)
    info.pop("cwd", None)
    write_atomically(out / "run_info.json", (json.dumps(info, indent=2, sort_keys=True) + "\n").encode("utf-8"))

    check_recomputation(cells, read_jsonl(out / "episodes.jsonl"))
    log.info("results written to %s", out)
    return out


def read_results(path: Union[str, Path]) -> List[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def replay_episode(components: Components, policy: Union[str, AgentParams] = "expert",
                   episode_seed: int = 0) -> EpisodeResult:
    """Per-step rewards of a single episode, scripted expert or a saved policy."""
    if isinstance(policy, AgentParams):
        controller = agent_policy(policy)
    elif policy == "expert":
        controller = expert_policy(components.env)
    elif policy == "random":
        controller = random_policy(make_rng(episode_seed, "random-policy"))
    else:
        raise ConfigError("unknown policy %r (expert, random or a policy file)" % (policy,))
    return run_episode(components, controller, episode_seed)


def format_rewards(episode: EpisodeResult) -> str:
    return " ".join("r%d=%.4f" % (i, r) for i, r in enumerate(episode.rewards))
