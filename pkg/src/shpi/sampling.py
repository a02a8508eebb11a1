"""Batched episode collection and policy evaluation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .data import Episode
from .envs.base import BatchEnv, SnapshotTrack
from .policies import sample_actions

METRIC_MODES = ("delta", "mean-per-step", "sum")


def collect_episodes(
    env: BatchEnv,
    policy: Callable[[np.ndarray], np.ndarray],
    n_episodes: int,
    rng: np.random.Generator,
    keep_snapshots: bool = False,
    first_id: int = 0,
) -> list[Episode]:
    """Run ``n_episodes`` full episodes in parallel and log them.

    Each logged step stores the propensity of the sampled action under
    ``policy``.  With ``keep_snapshots`` every step also keeps the simulator
    state from which it was taken.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    T = env.horizon
    obs = env.reset(n_episodes, rng)
    d = obs.shape[1]
    ctx = np.zeros((n_episodes, T, d))
    acts = np.zeros((n_episodes, T), dtype=np.int64)
    props = np.zeros((n_episodes, T))
    rews = np.zeros((n_episodes, T))
    snaps = [] if keep_snapshots else None
    for t in range(T):
        if keep_snapshots:
            snaps.append({k: v.copy() for k, v in env.state.items()})
        probs = policy(obs)
        a = sample_actions(probs, rng)
        ctx[:, t] = obs
        acts[:, t] = a
        props[:, t] = probs[np.arange(n_episodes), a]
        rews[:, t], _ = env.step(a, rng)
        obs = env.observe()
    episodes = []
    for i in range(n_episodes):
        track = None
        if keep_snapshots:
            track = SnapshotTrack({k: np.stack([s[k][i] for s in snaps]) for k in snaps[0]})
        episodes.append(Episode(ctx[i], acts[i], props[i], rews[i], episode_id=first_id + i, snapshots=track))
    return episodes


def episode_metric(rewards: np.ndarray, mode: str) -> np.ndarray:
    """Per-episode summary of a ``(n, T)`` reward array.

    ``delta``: last reward minus first reward; ``mean-per-step``: average
    reward; ``sum``: undiscounted return.
    """
    rewards = np.atleast_2d(rewards)
    if mode == "delta":
        return rewards[:, -1] - rewards[:, 0]
    if mode == "mean-per-step":
        return rewards.mean(axis=1)
    if mode == "sum":
        return rewards.sum(axis=1)
    raise ValueError(f"metric mode must be one of {METRIC_MODES}, got {mode!r}")


def rollout_rewards(
    env: BatchEnv,
    policy: Callable[[np.ndarray], np.ndarray],
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """True rewards ``(n, T)`` of ``n`` fresh episodes under ``policy``."""
    obs = env.reset(n, rng)
    out = np.zeros((n, env.horizon))
    for t in range(env.horizon):
        a = sample_actions(policy(obs), rng)
        out[:, t], _ = env.step(a, rng)
        obs = env.observe()
    return out


@dataclass(frozen=True)
class EvalReport:
    per_seed: tuple[float, ...]
    mode: str
    n_rollouts: int

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))

    @property
    def std(self) -> float:
        return float(np.std(self.per_seed, ddof=1)) if len(self.per_seed) > 1 else 0.0

    @property
    def stderr(self) -> float:
        return self.std / np.sqrt(len(self.per_seed)) if self.per_seed else 0.0


def evaluate(
    env: BatchEnv,
    policy: Callable[[np.ndarray], np.ndarray],
    n_rollouts: int = 200,
    metric_mode: str = "delta",
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
) -> EvalReport:
    """Mean episode metric over ``n_rollouts`` episodes, once per seed."""
    if metric_mode not in METRIC_MODES:
        raise ValueError(f"metric mode must be one of {METRIC_MODES}, got {metric_mode!r}")
    per_seed = []
    for s in seeds:
        rewards = rollout_rewards(env, policy, n_rollouts, np.random.default_rng(s))
        per_seed.append(float(episode_metric(rewards, metric_mode).mean()))
    return EvalReport(tuple(per_seed), metric_mode, n_rollouts)
