"""Short-horizon policy improvement loops, baselines and the proximal variant.

Each iteration estimates k-step advantages of the current greedy policy,
regresses them onto per-action heads and takes the argmax.  The offline
loop uses clipped importance-weighted targets from a fixed dataset; the
online loop collects fresh episodes and computes targets by simulator
rollouts.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .advantages import BONUS_WEIGHTS, AdvantageTable, ClipBounds, offline_k_advantages, online_k_advantages
from .approximator import Optimizer, Regressor, fit, head_mask, make_regressor, set_scaling
from .data import Dataset, window_episodes
from .envs.base import BatchEnv
from .policies import GreedyPolicy
from .sampling import collect_episodes
from .seeding import derive_seed, stage_rng
from .valuation import ValueModel, fit_value, zero_value

log = logging.getLogger(__name__)

BONUS_MODES = ("fitted", "zero", "external")


@dataclass(frozen=True)
class ShpiConfig:
    k: int = 5
    J: int = 10
    gamma: float = 0.99
    clip: ClipBounds = field(default_factory=ClipBounds)
    mode: str = "offline"
    bonus_mode: str = "fitted"
    proximal: float = 0.0
    update_value_each_iter: bool = False
    bonus_weight: str = "reached"
    per_factor_clip: bool = False
    # subtract the mean logged reward before building targets (offline)
    center_rewards: bool = True
    # scorer architecture; linear heads extrapolate benignly off the data support
    hidden: tuple[int, ...] = ()
    # hidden layers of a shared state baseline subtracted before the per-action
    # fit; None disables it.  Argmax is unchanged by any state-only shift.
    baseline_hidden: tuple[int, ...] | None = (32, 32)
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    probe_size: int = 512
    # online loop
    episodes_per_iter: int = 50
    n_rollouts: int = 1
    explore_epsilon: float = 0.2

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.J < 1:
            raise ValueError("J must be >= 1")
        if self.proximal < 0:
            raise ValueError("proximal weight must be >= 0")
        if self.mode not in ("online", "offline"):
            raise ValueError(f"mode must be 'online' or 'offline', got {self.mode!r}")
        if self.bonus_mode not in BONUS_MODES:
            raise ValueError(f"bonus_mode must be one of {BONUS_MODES}")
        if self.bonus_weight not in BONUS_WEIGHTS:
            raise ValueError(f"bonus_weight must be one of {BONUS_WEIGHTS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clip"] = [self.clip.q1, self.clip.q2]
        d["hidden"] = list(self.hidden)
        d["baseline_hidden"] = None if self.baseline_hidden is None else list(self.baseline_hidden)
        return d


# -- regression oracle --------------------------------------------------------

def regress_scorer(
    x: np.ndarray,
    y: np.ndarray,
    actions: np.ndarray,
    n_actions: int,
    config: ShpiConfig,
    seed: int,
    weight: np.ndarray | None = None,
) -> Regressor:
    """Least-squares fit of per-action heads; each sample trains its own action's head.

    With ``config.baseline_hidden`` set, a single-output state baseline is
    first fitted on all samples and the heads regress the residual.  The
    baseline is then dropped: it shifts every action's score equally, but
    removing it keeps large state-only components of the targets from being
    fitted separately (and differently) by each head.
    """
    if config.baseline_hidden is not None:
        base = make_regressor(x.shape[1], 1, config.baseline_hidden, seed=derive_seed(seed, "baseline"))
        set_scaling(base, x, y)
        base = fit(base, x, y, weight, optimizer=Optimizer("adam", config.lr),
                   epochs=config.epochs, batch_size=config.batch_size, seed=seed)
        y = y - base.predict(x)[:, 0]
    model = make_regressor(x.shape[1], n_actions, config.hidden, seed=seed)
    set_scaling(model, x, y)
    return fit(
        model, x, y, weight, head_mask(actions, n_actions),
        optimizer=Optimizer("adam", config.lr),
        epochs=config.epochs, batch_size=config.batch_size, seed=seed,
    )


def _greedy(policy) -> Callable[[np.ndarray], np.ndarray]:
    return policy.with_epsilon(0.0) if isinstance(policy, GreedyPolicy) else policy


def _probe_actions(policy, probe: np.ndarray) -> np.ndarray:
    if isinstance(policy, GreedyPolicy):
        return policy.greedy_actions(probe)
    return np.argmax(policy(probe), axis=1)


def _reward_shift(dataset: Dataset, value: ValueModel | None, config: ShpiConfig) -> float:
    if value is not None and "reward_shift" in value.regressor.meta:
        return float(value.regressor.meta["reward_shift"])
    if config.bonus_mode == "zero" and config.center_rewards:
        return float(np.mean(np.concatenate([ep.rewards for ep in dataset.episodes])))
    return 0.0


# -- density ratios and the proximal penalty -------------------------------------

@dataclass(frozen=True)
class DensityRatioModel:
    """Classifier-based estimate of ``log d_pi(x) / d_mu(x)``."""

    classifier: Regressor
    log_prior: float
    unreliable: bool = False

    def log_ratio(self, x: np.ndarray) -> np.ndarray:
        return self.classifier.predict(np.atleast_2d(x))[:, 0] - self.log_prior

    def ratio(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_ratio(x))


def fit_density_ratio(
    mu_states: np.ndarray,
    pi_states: np.ndarray,
    seed: int = 0,
    hidden: tuple[int, ...] = (),
    epochs: int = 100,
    lr: float = 1e-2,
    max_log_ratio: float = float(np.log(50.0)),
) -> DensityRatioModel:
    """Logistic discrimination between behavior states (label 0) and target states (label 1).

    The classifier logit minus the log class ratio estimates the log density
    ratio.  The model is flagged unreliable when the 95th percentile of the
    estimated log ratio over the target states exceeds ``max_log_ratio``.
    """
    mu_states = np.atleast_2d(mu_states)
    pi_states = np.atleast_2d(pi_states)
    if len(mu_states) == 0 or len(pi_states) == 0 or mu_states.size == 0 or pi_states.size == 0:
        raise ValueError("density ratio needs samples from both distributions (single-class input)")
    x = np.concatenate([mu_states, pi_states])
    y = np.concatenate([np.zeros(len(mu_states)), np.ones(len(pi_states))])
    model = make_regressor(x.shape[1], 1, hidden, seed=seed)
    set_scaling(model, x)
    clf = fit(model, x, y, loss="logistic", optimizer=Optimizer("adam", lr),
              epochs=epochs, batch_size=256, seed=seed)
    prior = float(np.log(len(pi_states) / len(mu_states)))
    est = DensityRatioModel(clf, prior)
    unreliable = bool(np.quantile(est.log_ratio(pi_states), 0.95) > max_log_ratio)
    return replace(est, unreliable=unreliable)


def proximal_targets(table: AdvantageTable, ratio: DensityRatioModel, lam: float) -> AdvantageTable:
    """Penalize targets by ``lam * log w(x)``; ``lam = 0`` returns the table itself."""
    if lam < 0:
        raise ValueError("proximal weight must be >= 0")
    if lam == 0:
        return table
    return table.with_estimates(table.estimates - lam * ratio.log_ratio(table.contexts))


def check_coverage_assumption(ratio: DensityRatioModel, pi0_states: np.ndarray, eps: float) -> bool:
    """True iff the estimated log ratio stays below ``eps`` on every sampled state."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    return bool(np.max(ratio.log_ratio(pi0_states)) <= eps)


def reweighted_states(
    dataset: Dataset,
    pi: Callable[[np.ndarray], np.ndarray],
    n: int,
    rng: np.random.Generator,
) -> np.ndarray | None:
    """Approximate target-policy states by resampling logged window states.

    State ``x_t`` of a window is weighted by the importance ratio of the
    ``t`` logged actions leading to it from the window start.  Returns None
    when every weight vanishes.
    """
    wd = dataset.windows
    W = dataset.window_length
    ctx = wd["contexts"][:, :W]
    N, _, d = ctx.shape
    probs = np.asarray(pi(ctx.reshape(-1, d))).reshape(N, W, -1)
    r = np.take_along_axis(probs, wd["actions"][:, :W, None], axis=2)[..., 0] / wd["propensities"][:, :W]
    w = np.concatenate([np.ones((N, 1)), np.cumprod(r[:, :-1], axis=1)], axis=1).ravel()
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        return None
    idx = rng.choice(len(w), size=n, p=w / total)
    return ctx.reshape(-1, d)[idx]


def _proximal_ratio(
    dataset: Dataset,
    policy,
    config: ShpiConfig,
    seed: int,
    env: BatchEnv | None,
) -> DensityRatioModel | None:
    rng = np.random.default_rng(seed)
    mu_states = dataset.windows["contexts"][:, :dataset.window_length].reshape(-1, dataset.context_dim)
    n = min(len(mu_states), 5000)
    mu_states = mu_states[rng.choice(len(mu_states), size=n, replace=False)]
    if env is not None:
        eps = collect_episodes(env, policy, max(1, n // env.horizon), rng)
        pi_states = np.concatenate([e.contexts for e in eps])
    else:
        pi_states = reweighted_states(dataset, policy, n, rng)
    if pi_states is None:
        warnings.warn("cannot sample target-policy states; proximal term disabled", RuntimeWarning)
        return None
    return fit_density_ratio(mu_states, pi_states, seed=seed)


# -- offline loop ---------------------------------------------------------------

def offline_shpi(
    dataset: Dataset,
    value: ValueModel | None,
    config: ShpiConfig = ShpiConfig(),
    seed: int = 0,
    evaluator: Callable[[GreedyPolicy], float] | None = None,
    env: BatchEnv | None = None,
    init_policy: GreedyPolicy | None = None,
) -> tuple[GreedyPolicy, list[dict]]:
    """Approximate policy iteration on a fixed dataset with clipped k-step targets.

    The initial policy is greedy around a randomly initialized scorer.  The
    loop stops early once the greedy actions on a probe set of logged
    contexts stop changing.  ``env`` is only used to sample target-policy
    states for the proximal penalty.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.k > dataset.window_length:
        raise ValueError(f"k={config.k} exceeds the window length {dataset.window_length}")
    A, d = dataset.action_count, dataset.context_dim
    if config.bonus_mode == "zero":
        value = zero_value(d, config.gamma)
    elif value is None:
        raise ValueError(f"bonus_mode={config.bonus_mode!r} needs a value model")
    shift = _reward_shift(dataset, value, config)

    rng = stage_rng(seed, "probe")
    all_ctx = np.concatenate([ep.contexts for ep in dataset.episodes])
    probe = all_ctx[rng.choice(len(all_ctx), size=min(config.probe_size, len(all_ctx)), replace=False)]

    policy = init_policy or GreedyPolicy(make_regressor(d, A, config.hidden, seed=derive_seed(seed, "init")))
    prev = _probe_actions(policy, probe)
    metrics = []
    for j in range(1, config.J + 1):
        table = offline_k_advantages(
            dataset, _greedy(policy), value, config.k, config.gamma, config.clip,
            config.bonus_weight, config.per_factor_clip, reward_shift=shift,
        )
        if config.proximal > 0:
            ratio = _proximal_ratio(dataset, _greedy(policy), config, derive_seed(seed, "ratio", j), env)
            if ratio is not None:
                table = proximal_targets(table, ratio, config.proximal)
        scorer = regress_scorer(table.contexts, table.estimates, table.actions, A, config,
                                derive_seed(seed, "fit", j))
        policy = GreedyPolicy(scorer, 0.0, {
            "k": config.k, "gamma": config.gamma, "bonus_mode": config.bonus_mode, "iteration": j,
        })
        cur = _probe_actions(policy, probe)
        row = {
            "iteration": j,
            "mean_target": float(table.estimates.mean()),
            "clipped_fraction": float(table.stats.get("clipped_fraction", 0.0)),
            "policy_change": float(np.mean(cur != prev)),
        }
        if evaluator is not None:
            row["eval_return"] = float(evaluator(policy))
        metrics.append(row)
        log.info("offline iteration %d: %s", j, row)
        if j > 1 and row["policy_change"] == 0.0:
            break
        prev = cur
    return policy, metrics


# -- online loop ----------------------------------------------------------------

def _online_loop(
    env: BatchEnv,
    mu,
    value: ValueModel | None,
    config: ShpiConfig,
    seed: int,
    targets: str,
    dataset_init: Dataset | None = None,
    evaluator: Callable[[GreedyPolicy], float] | None = None,
) -> tuple[GreedyPolicy, list[dict]]:
    A, d = env.action_count, env.context_dim
    if config.bonus_mode == "zero" or targets == "immediate":
        value = zero_value(d, config.gamma)
    elif value is None:
        if config.bonus_mode == "external" or dataset_init is None:
            raise ValueError("online SHPI with a fitted bonus needs value_init or dataset_init")
        value = fit_value(dataset_init, seed=derive_seed(seed, "value", 0))
    history = list(dataset_init.episodes) if dataset_init is not None else []

    probe_rng = stage_rng(seed, "probe")
    probe = env.reset(config.probe_size, probe_rng)
    policy = mu
    prev = _probe_actions(policy, probe)
    metrics = []
    for j in range(1, config.J + 1):
        behave = policy.with_epsilon(config.explore_epsilon) if isinstance(policy, GreedyPolicy) else policy
        eps = collect_episodes(env, behave, config.episodes_per_iter, stage_rng(seed, "collect", j),
                               keep_snapshots=targets == "k-step")
        x = np.concatenate([e.contexts for e in eps])
        a = np.concatenate([e.actions for e in eps])
        if targets == "immediate":
            y = np.concatenate([e.rewards for e in eps])
        else:
            snaps = [e.snapshots[i] for e in eps for i in range(len(e))]
            y, _ = online_k_advantages(env, snaps, a, _greedy(policy), value, config.k, config.gamma,
                                       config.n_rollouts, stage_rng(seed, "rollout", j))
        scorer = regress_scorer(x, y, a, A, config, derive_seed(seed, "fit", j))
        policy = GreedyPolicy(scorer, 0.0, {
            "k": config.k, "gamma": config.gamma, "bonus_mode": config.bonus_mode, "iteration": j,
        })
        cur = _probe_actions(policy, probe)
        row = {
            "iteration": j,
            "mean_target": float(np.mean(y)),
            "clipped_fraction": 0.0,
            "policy_change": float(np.mean(cur != prev)),
        }
        if evaluator is not None:
            row["eval_return"] = float(evaluator(policy))
        metrics.append(row)
        prev = cur
        if config.update_value_each_iter and targets == "k-step" and config.bonus_mode == "fitted":
            history.extend(eps)
            grown = window_episodes(history, env.horizon, env.horizon, config.gamma, A)
            value = fit_value(grown, seed=derive_seed(seed, "value", j))
    return policy, metrics


def online_shpi(
    env: BatchEnv,
    mu,
    value_init: ValueModel | None = None,
    config: ShpiConfig = ShpiConfig(mode="online"),
    seed: int = 0,
    dataset_init: Dataset | None = None,
    evaluator: Callable[[GreedyPolicy], float] | None = None,
) -> tuple[GreedyPolicy, list[dict]]:
    """Online improvement: collect with the current policy, roll out k-step targets, refit.

    The first collection uses ``mu``; later ones use the current greedy
    policy with ``explore_epsilon`` exploration.
    """
    return _online_loop(env, mu, value_init, config, seed, "k-step", dataset_init, evaluator)


def online_contextual_bandit(
    env: BatchEnv,
    mu,
    config: ShpiConfig = ShpiConfig(mode="online", k=1, bonus_mode="zero"),
    seed: int = 0,
    evaluator: Callable[[GreedyPolicy], float] | None = None,
) -> tuple[GreedyPolicy, list[dict]]:
    """Myopic baseline: regress the logged immediate reward of each action."""
    return _online_loop(env, mu, None, config, seed, "immediate", None, evaluator)


ALGORITHMS = ("shpi-offline", "shpi-online", "cb", "session-rl", "cpi-full-k")


def algorithm_config(algo: str, base: ShpiConfig, W: int) -> ShpiConfig:
    """Map an algorithm id onto an improvement configuration."""
    if algo == "shpi-offline":
        return replace(base, mode="offline")
    if algo == "shpi-online":
        return replace(base, mode="online")
    if algo == "cb":
        return replace(base, k=1, bonus_mode="zero")
    if algo == "session-rl":
        return replace(base, k=W, bonus_mode="zero")
    if algo == "cpi-full-k":
        return replace(base, k=W)
    raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGORITHMS}")
