#############################
#  RewardWin - Command Line Starter
#
#  One entry point, one subcommand per stage:
#  gen-data, train-classifier, eval-classifier,
#  fit-pca, train-policy, eval-policy, compare,
#  replay.
#
#  This program is distributed free
#  of charge (open source) under the
#  GNU General Public License
#############################

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import constants as C
from . import dataset, harness, rewardmodel, rlalgos, staterepr
from .harness import ExperimentConfig
from .preferences import parse_overrides
from .rewardwin_common import ConfigError, RewardWinError, UsageError, setup_logging

log = logging.getLogger(__name__)

PROG = "rewardwin"

DATASET_FILE = "dataset.rwds"
CLASSIFIER_FILE = "classifier.rwcl"
PCA_FILE = "pca.rwpc"
POLICY_FILE = "policy.rwpl"


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors are 1 here
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config file (key = value lines)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key, e.g. --set env.max_steps=40 (repeatable)")
    p.add_argument("--seed", type=int, help="base seed")
    p.add_argument("--out-dir", help="directory for every output file")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog=PROG, description="Reward-window states for a simulated grab-and-lift task.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render labelled capture sessions")
    _common(p)
    p.add_argument("--sessions", type=int, default=C.SESSION_COUNT)
    p.add_argument("--n-success", type=int, default=C.SESSION_SUCCESS)
    p.add_argument("--n-nonsuccess", type=int, default=C.SESSION_NONSUCCESS)
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="dataset file (default <out-dir>/%s)" % DATASET_FILE)

    p = sub.add_parser("train-classifier", help="train the success classifier")
    _common(p)
    p.add_argument("--data", help="dataset file")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--sweep", action="store_true", help="train the epochs x batch grid, keep the best")
    p.add_argument("--workers", type=int)
    p.add_argument("--out", help="classifier file (default <out-dir>/%s)" % CLASSIFIER_FILE)

    p = sub.add_parser("eval-classifier", help="accuracy per session and reward profile")
    _common(p)
    p.add_argument("--model", help="classifier file")
    p.add_argument("--data", help="dataset file")
    p.add_argument("--profile", type=int, default=0, metavar="EPISODES",
                   help="also score reset and expert-final frames over this many episodes")

    p = sub.add_parser("fit-pca", help="fit the PCA basis on the training sessions")
    _common(p)
    p.add_argument("--data", help="dataset file")
    p.add_argument("--k", type=int, default=C.PCA_COMPONENTS)
    p.add_argument("--method", default="auto", choices=("auto", "gram", "covariance"))
    p.add_argument("--out", help="basis file (default <out-dir>/%s)" % PCA_FILE)

    for name, text in (("train-policy", "train one DDPG/TD3 policy"),
                       ("eval-policy", "evaluate a saved policy")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--spec", help="state representation, e.g. rewards:15, pca:50, pixels:32x24")
        p.add_argument("--algo", choices=(C.ALGO_DDPG, C.ALGO_TD3))
        p.add_argument("--steps", type=int, help="environment steps")
        p.add_argument("--policy", help="policy file (default <out-dir>/%s)" % POLICY_FILE)
    p.add_argument("--random", action="store_true", help="evaluate a uniform-random policy instead")

    p = sub.add_parser("compare", help="spec x algorithm x seed grid with result tables")
    _common(p)
    p.add_argument("--spec", action="append", help="state representation (repeatable)")
    p.add_argument("--algo", action="append", choices=(C.ALGO_DDPG, C.ALGO_TD3))
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--steps", type=int, help="training and evaluation steps per cell")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("replay", help="print the per-step rewards of one episode")
    _common(p)
    p.add_argument("--spec")
    p.add_argument("--policy", default="expert", help="expert, random or a policy file")
    p.add_argument("--episode-seed", type=int, default=0)
    return parser


def load_config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.set, ExperimentConfig.keys())
    if args.config:
        config = ExperimentConfig.load(args.config, overrides)
    else:
        config = ExperimentConfig.from_preferences(overrides, base_dir=os.getcwd())
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out_dir:
        changes["out_dir"] = args.out_dir
    if getattr(args, "workers", None):
        changes["workers"] = args.workers
    if getattr(args, "steps", None):
        changes["train_steps"] = changes["eval_steps"] = args.steps
    spec = getattr(args, "spec", None)
    if isinstance(spec, list):
        changes["specs"] = tuple(s for item in spec for s in item.split(",") if s)
    elif spec:
        changes["spec"] = spec
    algo = getattr(args, "algo", None)
    if isinstance(algo, list):
        changes["algorithms"] = tuple(algo)
    elif algo:
        changes["algorithm"] = algo
    if getattr(args, "seeds", None):
        changes["n_seeds"] = args.seeds
    return dataclasses.replace(config, **changes)


def _out(config: ExperimentConfig, given: Optional[str], default: str) -> Path:
    return Path(given) if given else Path(config.out_dir) / default


def _classifier_path(config: ExperimentConfig) -> str:
    return config.classifier_path or str(Path(config.out_dir) / CLASSIFIER_FILE)


def _with_files(config: ExperimentConfig) -> ExperimentConfig:
    # fall back to the files earlier stages wrote into out_dir
    pca = config.pca_path or str(Path(config.out_dir) / PCA_FILE)
    return dataclasses.replace(config, classifier_path=_classifier_path(config), pca_path=pca)


def cmd_gen_data(args, config: ExperimentConfig) -> int:
    sessions = dataset.generate_sessions(config.env, args.sessions, config.seed, args.workers or config.workers,
                                         args.n_success, args.n_nonsuccess)
    path = dataset.save_dataset(_out(config, args.out, DATASET_FILE), sessions)
    print("wrote %d sessions (%d images) to %s" % (len(sessions), sum(len(s) for s in sessions), path))
    return C.EXIT_OK


def _load_split(config: ExperimentConfig, data: Optional[str]) -> dataset.DatasetSplit:
    sessions = dataset.load_dataset(_out(config, data, DATASET_FILE))
    return dataset.split(sessions)


def cmd_train_classifier(args, config: ExperimentConfig) -> int:
    parts = _load_split(config, args.data)
    if args.sweep:
        clf, report, reports = rewardmodel.sweep_classifiers(parts, seed=config.seed,
                                                             workers=args.workers or config.workers)
        for r in reports:
            print("epochs %2d batch %2d: val %.4f test %.4f" % (
                r.epochs, r.batch_size, r.validation_accuracy[r.best_epoch], r.test_accuracy))
    else:
        clf, report = rewardmodel.train_classifier(parts, args.epochs, args.batch, config.seed)
    for line in report.lines():
        print(line)
    path = rewardmodel.save_classifier(_out(config, args.out, CLASSIFIER_FILE), clf)
    print("wrote classifier to %s" % path)
    return C.EXIT_OK


def cmd_eval_classifier(args, config: ExperimentConfig) -> int:
    clf = rewardmodel.load_classifier(args.model or _classifier_path(config))
    for session in dataset.load_dataset(_out(config, args.data, DATASET_FILE)):
        print("session %2d: accuracy %.4f (%d images)"
              % (session.session_id, rewardmodel.evaluate_accuracy(clf, session), len(session)))
    if args.profile:
        start, end = rewardmodel.reward_profile(clf, config.env, args.profile, config.seed)
        print("mean reward: reset frames %.4f, expert final frames %.4f" % (start, end))
    return C.EXIT_OK


def cmd_fit_pca(args, config: ExperimentConfig) -> int:
    parts = _load_split(config, args.data)
    images, _ = dataset.DatasetSplit.stack(parts.train)
    basis = staterepr.fit_pca(images, args.k, args.method)
    path = staterepr.save_pca(_out(config, args.out, PCA_FILE), basis)
    print("wrote %d components of %d pixels to %s" % (basis.k, basis.dim, path))
    return C.EXIT_OK


def cmd_train_policy(args, config: ExperimentConfig) -> int:
    config = _with_files(config)
    out = Path(config.out_dir)
    params, curve = harness.train_policy(config, config.seed, log_path=out / "train.jsonl")
    path = rlalgos.save_policy(_out(config, args.policy, POLICY_FILE), params)
    wins = sum(1 for r in curve if r["success"])
    print("%d training episodes, %d successes; wrote %s" % (len(curve), wins, path))
    return C.EXIT_OK


def cmd_eval_policy(args, config: ExperimentConfig) -> int:
    config = _with_files(config)
    if args.random:
        metrics = harness.evaluate_random(config, config.seed)
    else:
        params = rlalgos.load_policy(_out(config, args.policy, POLICY_FILE))
        components = harness.load_components(config, str(params.spec))
        metrics = harness.evaluate_policy(params, config, config.seed, components)
    harness.write_jsonl(Path(config.out_dir) / "eval.jsonl", metrics.logs)
    print("episodes %d, task success %.2f%%, avg reward %.4f"
          % (metrics.episodes, metrics.task_success_pct, metrics.avg_reward))
    return C.EXIT_OK


def cmd_compare(args, config: ExperimentConfig) -> int:
    config = _with_files(config)
    cells = harness.compare_representations(config)
    print(harness.format_summary(cells, config.algorithms), end="")
    return C.EXIT_OK


def cmd_replay(args, config: ExperimentConfig) -> int:
    config = _with_files(config)
    policy = args.policy
    spec = None
    if policy not in ("expert", "random"):
        policy = rlalgos.load_policy(policy)
        spec = str(policy.spec)
    components = harness.load_components(config, spec)
    episode = harness.replay_episode(components, policy, args.episode_seed)
    print(harness.format_rewards(episode))
    print("length %d, success %s, cumulative reward %.4f"
          % (episode.length, episode.success, episode.cumulative_reward))
    return C.EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-classifier": cmd_train_classifier,
    "eval-classifier": cmd_eval_classifier,
    "fit-pca": cmd_fit_pca,
    "train-policy": cmd_train_policy,
    "eval-policy": cmd_eval_policy,
    "compare": cmd_compare,
    "replay": cmd_replay,
}


def usage() -> str:
    lines = ["", "Available %s commands:" % PROG, ""]
    lines += ["\t" + name for name in COMMANDS]
    lines += ["", "USAGE: %s <command> [--config FILE] [--set KEY=VALUE ...]" % PROG, ""]
    return "\n".join(lines)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if not args.command:
            print(usage())
            return C.EXIT_USAGE
        config = load_config(args)
        setup_logging(config.out_dir if args.command in ("train-policy", "compare") else None, args.verbose)
        return COMMANDS[args.command](args, config)
    except (ConfigError, UsageError) as e:
        sys.stderr.write("%s: error: %s\n" % (PROG, e))
        return C.EXIT_USAGE
    except RewardWinError as e:
        sys.stderr.write("%s: error: %s\n" % (PROG, e))
        return C.EXIT_RUNTIME
    except KeyboardInterrupt:
        sys.stderr.write("%s: interrupted\n" % PROG)
        return C.EXIT_RUNTIME
    except (OSError, ValueError) as e:
        log.debug("unhandled error", exc_info=True)
        sys.stderr.write("%s: error: %s\n" % (PROG, e))
        return C.EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
