"""Experiment pipelines: pretrain, collect, fit value, train, evaluate.

Every stage draws its randomness from ``derive_seed(config.seed, stage)``,
so outputs depend only on the configuration.  A failing stage raises
:class:`StageError` naming the stage.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from ..advantages import advantage_mse_diagnostic, mse_rows_csv
from ..approximator import Optimizer
from ..data import Dataset, save_dataset
from ..envs.base import BatchEnv
from ..improvement import algorithm_config, offline_shpi, online_contextual_bandit, online_shpi
from ..policies import GreedyPolicy, UniformPolicy
from ..sampling import EvalReport, evaluate
from ..seeding import derive_seed
from ..valuation import ValueModel, backshift_dataset, fit_value
from .behavior import collect, corrupt_policy, corrupt_rewards, pretrain_behavior, uniform_behavior
from .config import ExperimentConfig

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


def run_stage(name: str, fn: Callable[[], Any]) -> Any:
    log.info("stage %s", name)
    try:
        return fn()
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


# -- individual stages --------------------------------------------------------------

def build_behavior(env: BatchEnv, config: ExperimentConfig) -> GreedyPolicy:
    lg = config.logging
    if lg.epsilon == 1.0 and lg.skip_pretrain_if_uniform:
        return uniform_behavior(env, seed=derive_seed(config.seed, "pretrain") % 2**31)
    critic = pretrain_behavior(
        env, lg.pretrain_episodes, seed=derive_seed(config.seed, "pretrain"),
        gamma=config.algorithm.shpi.gamma,
    )
    return corrupt_policy(critic, lg.epsilon)


def collect_dataset(
    env: BatchEnv,
    behavior,
    config: ExperimentConfig,
    keep_snapshots: bool = False,
) -> Dataset:
    ds = config.dataset
    return collect(
        env, behavior, ds.n_offline, ds.W, ds.delta, seed=derive_seed(config.seed, "collect"),
        gamma=config.algorithm.shpi.gamma, keep_snapshots=keep_snapshots,
    )


def apply_bias(dataset: Dataset, config: ExperimentConfig) -> Dataset:
    b = config.dataset.bias
    if b is None:
        return dataset
    return corrupt_rewards(dataset, b.mean, b.std, b.period, seed=derive_seed(config.seed, "corrupt"))


def fit_value_model(dataset: Dataset, config: ExperimentConfig) -> ValueModel:
    """Fit ``V^mu`` on mean-centered logged rewards, or load it from ``value.path``."""
    vs = config.value
    if vs.path:
        return ValueModel.load(vs.path)
    shift = float(np.mean(np.concatenate([ep.rewards for ep in dataset.episodes])))
    return fit_value(
        dataset,
        optimizer=Optimizer("adam", vs.lr, anneal_to=vs.anneal_to),
        epochs=vs.epochs,
        seed=derive_seed(config.seed, "value") % 2**31,
        batch_size=vs.batch_size,
        residual=vs.residual,
        reward_shift=shift,
        hidden=tuple(vs.hidden),
    )


def with_reward_shift(value: ValueModel, shift: float) -> ValueModel:
    reg = value.regressor.copy()
    reg.meta = {**reg.meta, "reward_shift": float(shift)}
    return ValueModel(reg, value.gamma)


def prepare_training_data(dataset: Dataset, value: ValueModel, config: ExperimentConfig) -> tuple[Dataset, ValueModel]:
    """Backshift rewards when configured.

    Backshifted rewards already live on the value model's centered scale, so
    the returned value model carries a zero reward shift.
    """
    if not config.value.backshift:
        return dataset, value
    return backshift_dataset(dataset, value), with_reward_shift(value, 0.0)


def train(
    algo: str,
    env: BatchEnv,
    dataset: Dataset,
    value: ValueModel,
    behavior,
    config: ExperimentConfig,
    k: int | None = None,
) -> tuple[GreedyPolicy, list[dict]]:
    base = config.algorithm.shpi
    if k is not None:
        base = replace(base, k=k)
    cfg = algorithm_config(algo, base, dataset.window_length)
    seed = derive_seed(config.seed, "train", algo, cfg.k)
    if algo == "shpi-online":
        return online_shpi(env, behavior, value, cfg, seed=seed, dataset_init=dataset)
    return offline_shpi(dataset, value, cfg, seed=seed)


def evaluate_policy(env: BatchEnv, policy, config: ExperimentConfig, key: str) -> EvalReport:
    ev = config.evaluation
    seeds = tuple(derive_seed(config.seed, "evaluate", key, i) for i in range(ev.n_seeds))
    return evaluate(env, policy, ev.n_rollouts, config.metric, seeds)


# -- output helpers ---------------------------------------------------------------------

def _csv(header: list[str], rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def metrics_csv(metrics: list[dict]) -> str:
    keys = ["iteration", "mean_target", "clipped_fraction", "policy_change", "eval_return"]
    keys = [k for k in keys if any(k in m for m in metrics)]
    return _csv(keys, [[m.get(k, "") for k in keys] for m in metrics])


def comparison_csv(reports: dict[str, EvalReport]) -> str:
    return _csv(["algo", "mean", "std"], [[name, r.mean, r.std] for name, r in reports.items()])


@dataclass
class ExperimentResult:
    kind: str
    reports: dict[str, EvalReport] = field(default_factory=dict)
    mse_rows: list[dict] = field(default_factory=list)
    files: dict[str, str] = field(default_factory=dict)

    def summary(self, config: ExperimentConfig) -> str:
        lines = [
            f"experiment: {self.kind}",
            f"environment: {config.environment.name}",
            f"seed: {config.seed}",
            f"logging epsilon: {config.logging.epsilon!r}",
            f"metric: {config.metric}",
            "",
        ]
        if self.reports:
            lines.append("returns (mean over seeds, std across seeds):")
            for name, r in self.reports.items():
                lines.append(f"  {name}: {r.mean:.6g} +/- {r.std:.6g}  per-seed={[float(f'{v:.6g}') for v in r.per_seed]}")
        if self.mse_rows:
            lines.append("advantage MSE by k:")
            for row in self.mse_rows:
                lines.append(f"  k={row['k']}: mse={row['mse']:.6g} stderr={row['stderr']:.6g}")
        lines.append("")
        lines.append("files: " + ", ".join(sorted(self.files)))
        return "\n".join(lines) + "\n"


# -- pipelines ----------------------------------------------------------------------------

def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None) -> ExperimentResult:
    """Run the experiment named by ``config.experiment.kind``; write outputs to ``out_dir``."""
    kind = config.experiment.kind
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    result = ExperimentResult(kind)

    def write(name: str, text: str) -> None:
        result.files[name] = text
        if out is not None:
            (out / name).write_text(text)

    write("config.yaml", config.dumps())
    env = run_stage("environment", config.environment.build)
    behavior = run_stage("pretrain", lambda: build_behavior(env, config))
    if isinstance(behavior, GreedyPolicy):
        write("behavior.json", behavior.dumps())
    need_snaps = kind in ("ablate-k", "mse-advantage")
    dataset = run_stage("collect", lambda: collect_dataset(env, behavior, config, keep_snapshots=need_snaps))
    dataset = run_stage("corrupt", lambda: apply_bias(dataset, config))
    if out is not None:
        run_stage("write-dataset", lambda: save_dataset(dataset, out / "dataset.csv"))
    value = run_stage("fit-value", lambda: fit_value_model(dataset, config))
    write("value.json", value.dumps())
    train_data, train_value = run_stage("backshift", lambda: prepare_training_data(dataset, value, config))

    result.reports["logging"] = run_stage("evaluate", lambda: evaluate_policy(env, behavior, config, "logging"))

    if kind == "run":
        algo = config.algorithm.name
        policy, metrics = run_stage("train", lambda: train(algo, env, train_data, train_value, behavior, config))
        write("policy.json", policy.dumps())
        write("metrics.csv", metrics_csv(metrics))
        result.reports[algo] = run_stage("evaluate", lambda: evaluate_policy(env, policy, config, algo))
    elif kind == "baseline-sweep":
        for algo in config.experiment.algorithms:
            policy, metrics = run_stage("train", lambda a=algo: train(a, env, train_data, train_value, behavior, config))
            write(f"policy_{algo}.json", policy.dumps())
            write(f"metrics_{algo}.csv", metrics_csv(metrics))
            result.reports[algo] = run_stage("evaluate", lambda p=policy, a=algo: evaluate_policy(env, p, config, a))
    elif kind in ("ablate-k", "mse-advantage"):
        pi = run_stage("target-policy", lambda: _diagnostic_policy(env, train_data, train_value, behavior, config))
        result.mse_rows = run_stage("mse-advantage", lambda: run_mse(env, train_data, pi, behavior, train_value, config))
        write("mse.csv", mse_rows_csv(result.mse_rows))
        if kind == "ablate-k":
            rows = []
            for k in config.experiment.k_list:
                kk = min(int(k), dataset.window_length)
                policy, _ = run_stage("train", lambda kk=kk: train("shpi-offline", env, train_data, train_value, behavior, config, k=kk))
                rep = run_stage("evaluate", lambda p=policy, kk=kk: evaluate_policy(env, p, config, f"k={kk}"))
                result.reports[f"shpi-offline k={kk}"] = rep
                mse = next(r for r in result.mse_rows if r["k"] == kk)
                rows.append([kk, mse["mse"], mse["stderr"], rep.mean, rep.std])
            write("ablate_k.csv", _csv(["k", "mse", "stderr", "mean", "std"], rows))
    write("returns.csv", comparison_csv(result.reports))
    write("summary.txt", result.summary(config))
    return result


def _diagnostic_policy(env, dataset, value, behavior, config: ExperimentConfig):
    """Target policy for advantage diagnostics: the behavior critic's greedy policy,
    or an offline SHPI policy when logging was uniform and no critic exists."""
    if isinstance(behavior, GreedyPolicy) and behavior.epsilon < 1.0:
        return behavior.with_epsilon(0.0)
    policy, _ = train("shpi-offline", env, dataset, value, behavior, config)
    return policy


def run_mse(env, dataset, pi, behavior, value, config: ExperimentConfig) -> list[dict]:
    ex = config.experiment
    ks = sorted({min(int(k), dataset.window_length) for k in ex.k_list})
    shift = float(value.regressor.meta.get("reward_shift", 0.0))
    return advantage_mse_diagnostic(
        env, dataset, pi, behavior, value, ks,
        gamma=config.algorithm.shpi.gamma,
        n_truth_rollouts=ex.n_truth_rollouts,
        n_probes=ex.n_probes,
        clip=config.algorithm.shpi.clip,
        seed=derive_seed(config.seed, "mse"),
        bonus_weight=config.algorithm.shpi.bonus_weight,
        reward_shift=shift,
    )


__all__ = [
    "ExperimentResult",
    "StageError",
    "apply_bias",
    "build_behavior",
    "collect_dataset",
    "comparison_csv",
    "evaluate_policy",
    "fit_value_model",
    "metrics_csv",
    "prepare_training_data",
    "run_stage",
    "run_experiment",
    "train",
    "with_reward_shift",
]
