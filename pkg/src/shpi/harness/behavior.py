"""Behavior policies and logged data: SARSA pretraining, collection, reward corruption."""

from __future__ import annotations

import numpy as np

from ..approximator import Optimizer, fit, head_mask, make_regressor, set_scaling
from ..data import Dataset, Episode, window_episodes
from ..envs.base import BatchEnv
from ..policies import GreedyPolicy, UniformPolicy, corrupt_policy
from ..sampling import collect_episodes
from ..seeding import stage_rng


def _sarsa_arrays(batches: list[list[Episode]]) -> dict[str, np.ndarray]:
    """Stack ``(x, a, r, x', a', terminal)`` tuples from lists of full episodes."""
    cols = {k: [] for k in ("x", "a", "r", "x_next", "a_next", "terminal")}
    for batch in batches:
        for ep in batch:
            n = len(ep)
            cols["x"].append(ep.contexts)
            cols["a"].append(ep.actions)
            cols["r"].append(ep.rewards)
            # the successor of the last step is never used (terminal)
            cols["x_next"].append(np.vstack([ep.contexts[1:], ep.contexts[-1:]]))
            cols["a_next"].append(np.append(ep.actions[1:], 0))
            term = np.zeros(n)
            term[-1] = 1.0
            cols["terminal"].append(term)
    return {k: np.concatenate(v) for k, v in cols.items()}


def pretrain_behavior(
    env: BatchEnv,
    episodes: int = 2000,
    seed: int = 0,
    gamma: float = 0.99,
    hidden: tuple[int, ...] = (32, 32),
    batch_episodes: int = 50,
    replay_batches: int = 4,
    epochs: int = 2,
    lr: float = 1e-3,
    eps_start: float = 1.0,
    eps_end: float = 0.1,
    n_check: int = 20,
) -> GreedyPolicy:
    """Fitted one-step SARSA with a per-action Q network.

    Episodes are collected ``batch_episodes`` at a time with an epsilon-greedy
    policy around the current critic, epsilon decaying linearly from
    ``eps_start`` to ``eps_end``.  After each batch the critic takes
    ``epochs`` passes of semi-gradient SARSA updates over the last
    ``replay_batches`` batches.  The returned greedy policy is the checkpoint
    with the best mean return on ``n_check`` greedy episodes, which guards
    against late collapses of the critic.
    """
    A, d = env.action_count, env.context_dim
    rng = stage_rng(seed, "sarsa")
    q = make_regressor(d, A, hidden, seed=int(rng.integers(2**31)))
    warm = collect_episodes(env, UniformPolicy(A), min(batch_episodes, episodes), rng)
    disc = gamma ** np.arange(env.horizon)
    rtg = [np.cumsum((ep.rewards * disc[:len(ep)])[::-1])[::-1] / disc[:len(ep)] for ep in warm]
    set_scaling(q, np.concatenate([ep.contexts for ep in warm]), np.concatenate(rtg))

    n_batches = max(1, -(-episodes // batch_episodes))
    replay: list[list[Episode]] = []
    best_score, best = -np.inf, q
    for b in range(n_batches):
        n = min(batch_episodes, episodes - b * batch_episodes)
        eps = eps_start + (eps_end - eps_start) * b / max(1, n_batches - 1)
        replay = (replay + [collect_episodes(env, GreedyPolicy(q, eps), n, rng)])[-replay_batches:]
        data = _sarsa_arrays(replay)

        def targets(model, idx, data=data):
            q_next = model.predict(data["x_next"][idx])[np.arange(len(idx)), data["a_next"][idx]]
            y = data["r"][idx] + gamma * (1.0 - data["terminal"][idx]) * q_next
            return np.repeat(y[:, None], A, axis=1)

        q = fit(
            q, data["x"], np.zeros((len(data["x"]), A)), None, head_mask(data["a"], A),
            optimizer=Optimizer("adam", lr), epochs=epochs, batch_size=256,
            seed=int(rng.integers(2**31)), targets=targets,
        )
        check = collect_episodes(env, GreedyPolicy(q, 0.0), n_check, stage_rng(seed, "sarsa-check", b))
        score = float(np.mean([ep.rewards.sum() for ep in check]))
        if score > best_score:
            best_score, best = score, q
    return GreedyPolicy(best, 0.0, {"trainer": "sarsa", "episodes": episodes, "check_return": best_score})


def uniform_behavior(env: BatchEnv, seed: int = 0) -> GreedyPolicy:
    """A fully random logging policy in greedy form (epsilon = 1)."""
    q = make_regressor(env.context_dim, env.action_count, (), seed=seed)
    return GreedyPolicy(q, 1.0)


def collect(
    env: BatchEnv,
    policy,
    n_episodes: int,
    W: int,
    delta: int,
    seed: int = 0,
    gamma: float = 0.99,
    keep_snapshots: bool = False,
) -> Dataset:
    """Log ``n_episodes`` episodes of ``policy`` and cut them into windows."""
    rng = np.random.default_rng(seed)
    eps = collect_episodes(env, policy, n_episodes, rng, keep_snapshots=keep_snapshots)
    return window_episodes(eps, W, delta, gamma, env.action_count)


def corrupt_rewards(
    dataset: Dataset,
    bias_mean: float,
    bias_std: float,
    refresh_period: int,
    seed: int = 0,
) -> Dataset:
    """Add a piecewise-constant random bias to every logged reward.

    A new bias level is drawn from ``N(bias_mean, bias_std^2)`` every
    ``refresh_period`` steps of each episode.
    """
    if refresh_period < 1:
        raise ValueError("refresh_period must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for ep in dataset.episodes:
        n_blocks = -(-len(ep) // refresh_period)
        levels = rng.normal(bias_mean, bias_std, size=n_blocks) if bias_std > 0 else np.full(n_blocks, bias_mean)
        bias = np.repeat(levels, refresh_period)[:len(ep)]
        out.append(ep.with_rewards(ep.rewards + bias))
    return dataset.with_episodes(out)


__all__ = [
    "collect",
    "corrupt_policy",
    "corrupt_rewards",
    "pretrain_behavior",
    "uniform_behavior",
]
