"""Command-line interface.

Every subcommand reads the same configuration tree (``--config``, default
the shipped ``default.yaml``), applies ``--set section.key=value``
overrides and writes its outputs to ``--out``.  A failing stage exits with
status 2 and names the stage on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .data import load_dataset, save_dataset
from .harness.config import ConfigError, ExperimentConfig, config_from_dict, default_config_path
from .harness.experiments import (
    StageError,
    apply_bias,
    build_behavior,
    collect_dataset,
    comparison_csv,
    evaluate_policy,
    fit_value_model,
    metrics_csv,
    prepare_training_data,
    run_experiment,
    run_stage,
    train,
)
from .harness.verify import verify_identities
from .improvement import ALGORITHMS
from .policies import GreedyPolicy
from .valuation import ValueModel

log = logging.getLogger("shpi")


def apply_override(tree: dict, assignment: str) -> None:
    """Set ``a.b.c=value`` in a nested dict; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like section.key=value, got {assignment!r}")
    *parents, leaf = key.split(".")
    node = tree
    for p in parents:
        child = node.get(p)
        if child is None:
            child = node[p] = {}
        if not isinstance(child, dict):
            raise ConfigError(f"{p!r} in {key!r} is not a section")
        node = child
    node[leaf] = yaml.safe_load(raw)


def build_config(path: str | None, overrides: list[str], seed: int | None) -> ExperimentConfig:
    source = Path(path) if path else default_config_path()
    try:
        tree = yaml.safe_load(source.read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read {source}: {exc}") from exc
    for item in overrides:
        apply_override(tree, item)
    if seed is not None:
        tree["seed"] = seed
    return config_from_dict(tree)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path: str, config: ExperimentConfig, env):
    ds = config.dataset
    return load_dataset(path, ds.W, ds.delta, config.algorithm.shpi.gamma, env.action_count)


# -- subcommands -------------------------------------------------------------------

def cmd_collect(args, config: ExperimentConfig) -> int:
    out = _out_dir(args)
    env = run_stage("environment", config.environment.build)
    behavior = run_stage("pretrain", lambda: build_behavior(env, config))
    behavior.save(out / "behavior.json")
    dataset = run_stage("collect", lambda: collect_dataset(env, behavior, config))
    dataset = run_stage("corrupt", lambda: apply_bias(dataset, config))
    run_stage("write-dataset", lambda: save_dataset(dataset, out / "dataset.csv"))
    (out / "config.yaml").write_text(config.dumps())
    print(f"{len(dataset.episodes)} episodes, {len(dataset)} windows -> {out / 'dataset.csv'}")
    return 0


def cmd_fit_value(args, config: ExperimentConfig) -> int:
    out = _out_dir(args)
    env = run_stage("environment", config.environment.build)
    dataset = run_stage("load-dataset", lambda: _load_dataset(args.dataset, config, env))
    value = run_stage("fit-value", lambda: fit_value_model(dataset, config))
    value.save(out / "value.json")
    print(f"value model -> {out / 'value.json'}")
    return 0


def cmd_train(args, config: ExperimentConfig) -> int:
    out = _out_dir(args)
    env = run_stage("environment", config.environment.build)
    dataset = run_stage("load-dataset", lambda: _load_dataset(args.dataset, config, env))
    if args.value:
        value = run_stage("load-value", lambda: ValueModel.load(args.value))
    else:
        value = run_stage("fit-value", lambda: fit_value_model(dataset, config))
    if args.behavior:
        behavior = run_stage("load-behavior", lambda: GreedyPolicy.load(args.behavior))
    else:
        behavior = run_stage("pretrain", lambda: build_behavior(env, config))
    dataset, value = run_stage("backshift", lambda: prepare_training_data(dataset, value, config))
    policy, metrics = run_stage("train", lambda: train(args.algo, env, dataset, value, behavior, config, k=args.k))
    policy.save(out / "policy.json")
    (out / "metrics.csv").write_text(metrics_csv(metrics))
    print(f"{args.algo} policy after {len(metrics)} iterations -> {out / 'policy.json'}")
    return 0


def cmd_evaluate(args, config: ExperimentConfig) -> int:
    out = _out_dir(args)
    env = run_stage("environment", config.environment.build)
    reports = {}
    for path in args.policy:
        policy = run_stage("load-policy", lambda p=path: GreedyPolicy.load(p))
        # one seed key for all policies so they face the same rollouts
        reports[str(Path(path).with_suffix(""))] = run_stage(
            "evaluate", lambda p=policy: evaluate_policy(env, p, config, "cli"))
    text = comparison_csv(reports)
    (out / "returns.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def _pipeline(kind: str | None):
    def run(args, config: ExperimentConfig) -> int:
        if kind is not None:
            config = replace(config, experiment=replace(config.experiment, kind=kind))
        result = run_experiment(config, _out_dir(args))
        sys.stdout.write(result.summary(config))
        return 0

    return run


def cmd_verify(args, config: ExperimentConfig) -> int:
    checks = run_stage("verify", lambda: verify_identities(args.n_mdps, config.seed))
    for c in checks:
        print(c.line())
    return 0 if all(c.passed for c in checks) else 1


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file (default: the shipped default.yaml)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration entry, e.g. algorithm.shpi.k=10 (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log stage progress")

    parser = argparse.ArgumentParser(prog="shpi", description="Short-horizon policy improvement experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, fn, help_text: str, out: bool = True) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help_text)
        if out:
            p.add_argument("--out", default="out", help="output directory (default: out)")
        p.set_defaults(func=fn)
        return p

    add("collect", cmd_collect, "build the logging policy and log a dataset")
    p = add("fit-value", cmd_fit_value, "fit the behavior value model on a dataset")
    p.add_argument("--dataset", required=True)
    p = add("train", cmd_train, "train one algorithm on a dataset")
    p.add_argument("--algo", choices=ALGORITHMS, default="shpi-offline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--value", help="saved value model (fitted on the dataset when omitted)")
    p.add_argument("--behavior", help="saved logging policy (needed by shpi-online)")
    p.add_argument("--k", type=int, help="horizon override")
    p = add("evaluate", cmd_evaluate, "evaluate saved policies on the true rewards")
    p.add_argument("--policy", required=True, nargs="+")
    add("ablate-k", _pipeline("ablate-k"), "advantage MSE and return for each k in experiment.k_list")
    add("mse-advantage", _pipeline("mse-advantage"), "advantage MSE against simulator truth for each k")
    add("run", _pipeline(None), "full pipeline for the configured experiment kind")
    p = add("verify", cmd_verify, "exact identity checks on random tabular MDPs", out=False)
    p.add_argument("--n-mdps", type=int, default=50)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = build_config(args.config, args.overrides, args.seed)
        return args.func(args, config)
    except ConfigError as exc:
        print(f"error: stage 'config' failed: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
