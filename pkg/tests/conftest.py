from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from shpi.data import Episode, Step
from shpi.mdp import TabularMDP, TabularPolicy

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


def make_stream(n: int, d: int = 2, n_actions: int = 3, seed: int = 0) -> list[Step]:
    rng = np.random.default_rng(seed)
    return [
        Step(rng.normal(size=d), int(rng.integers(n_actions)), float(rng.uniform(0.1, 1.0)),
             float(rng.normal()), time_index=i)
        for i in range(n)
    ]


def make_episode(n: int, d: int = 2, n_actions: int = 3, seed: int = 0, episode_id: int = 0) -> Episode:
    return Episode.from_steps(make_stream(n, d, n_actions, seed), episode_id=episode_id)


def self_loop_mdp(reward: float = 1.0, gamma: float = 0.5, horizon: int = 3) -> TabularMDP:
    return TabularMDP(np.ones((1, 1, 1)), np.array([[reward]]), np.ones(1), horizon, gamma)


def chain_mdp(gamma: float = 0.9, horizon: int = 4) -> TabularMDP:
    """Two states, two actions: action 1 moves to the rewarding state 1."""
    P = np.zeros((2, 2, 2))
    P[:, 0, 0] = 1.0
    P[:, 1, 1] = 1.0
    R = np.array([[0.0, -0.1], [1.0, 0.9]])
    return TabularMDP(P, R, np.array([1.0, 0.0]), horizon, gamma)


def uniform(S: int, A: int) -> TabularPolicy:
    return TabularPolicy(np.full((S, A), 1.0 / A))


def markov_stream(mdp, mu, n: int, seed: int) -> Episode:
    """One long on-policy stream of a stationary chain with one-hot contexts."""
    rng = np.random.default_rng(seed)
    S, A = mdp.n_states, mdp.n_actions
    s = np.empty(n, dtype=np.int64)
    a = np.empty(n, dtype=np.int64)
    s[0] = rng.choice(S, p=mdp.initial_dist)
    u = rng.random((n, 2))
    for i in range(n):
        a[i] = np.searchsorted(np.cumsum(mu.probs[s[i]]), u[i, 0] * (1 - 1e-12))
        if i + 1 < n:
            s[i + 1] = np.searchsorted(np.cumsum(mdp.transition[s[i], a[i]]), u[i, 1] * (1 - 1e-12))
    return Episode(np.eye(S)[s], a, mu.probs[s, a], mdp.reward[s, a])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance outcomes, filled by test_acceptance and echoed in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
