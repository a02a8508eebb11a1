"""A finite MDP exposed through the batched environment interface."""

from __future__ import annotations

import numpy as np

from ..mdp import TabularMDP, tabular_contexts
from .base import BatchEnv


class TabularEnv(BatchEnv):
    """Samples a :class:`TabularMDP`.

    Contexts are one-hot ``(t, s)`` codes when ``time_features`` is set
    (matching time-indexed tabular policies and values) and one-hot ``s``
    otherwise.
    """

    def __init__(self, mdp: TabularMDP, time_features: bool = True):
        super().__init__()
        self.mdp = mdp
        self.time_features = time_features
        self.action_count = mdp.n_actions
        self.horizon = mdp.horizon
        S = mdp.n_states
        self.context_dim = (mdp.horizon + 1) * S if time_features else S
        self._cum_P = np.cumsum(mdp.transition, axis=-1)

    def _initial(self, n, rng):
        cdf = np.cumsum(self.mdp.initial_dist)
        s = np.minimum((rng.random((n, 1)) >= cdf).sum(axis=1), self.mdp.n_states - 1)
        return {"s": s}

    def _transition(self, state, actions, rng):
        s = state["s"]
        nxt = (rng.random((len(s), 1)) >= self._cum_P[s, actions]).sum(axis=1)
        rewards = self.mdp.reward[s, actions]
        return {"s": np.minimum(nxt, self.mdp.n_states - 1)}, rewards

    def _observe(self, state):
        S = self.mdp.n_states
        if self.time_features:
            return tabular_contexts(state["s"], state["t"], S, self.horizon)
        return np.eye(S)[state["s"]]
