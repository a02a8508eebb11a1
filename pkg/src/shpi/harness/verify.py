"""Exact identity checks on random tabular MDPs (the ``verify`` command)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..mdp import TabularMDP, TabularPolicy, dp_k_advantage, dp_q, dp_value, pdl_residual, random_mdp, random_policy


@dataclass(frozen=True)
class IdentityCheck:
    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst {self.worst:.3e} (tolerance {self.tolerance:.0e})"


def random_instances(
    n: int, seed: int = 0, max_states: int = 6, max_actions: int = 4, max_horizon: int = 8
) -> list[tuple[TabularMDP, TabularPolicy, TabularPolicy]]:
    """``n`` random ``(mdp, mu, pi)`` triples with time-varying policies."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        S = int(rng.integers(1, max_states + 1))
        A = int(rng.integers(1, max_actions + 1))
        T = int(rng.integers(1, max_horizon + 1))
        gamma = float(rng.choice([1.0, rng.uniform(0.5, 1.0)]))
        mdp = random_mdp(rng, S, A, T, gamma)
        out.append((mdp, random_policy(rng, S, A, T), random_policy(rng, S, A, T)))
    return out


def verify_identities(n_mdps: int = 50, seed: int = 0) -> list[IdentityCheck]:
    """k-step performance difference and the k = 1 / k = T endpoint identities."""
    pdl = endpoint_1 = endpoint_T = 0.0
    for mdp, mu, pi in random_instances(n_mdps, seed):
        T = mdp.horizon
        for k in range(1, T + 1):
            pdl = max(pdl, pdl_residual(mdp, mu, pi, k))
        a_mu = dp_q(mdp, mu) - dp_value(mdp, mu)[:T, :, None]
        endpoint_1 = max(endpoint_1, float(np.max(np.abs(dp_k_advantage(mdp, mu, pi, 1) - a_mu))))
        q_pi = dp_q(mdp, pi) - dp_value(mdp, mu)[:T, :, None]
        # past the end of the episode the remaining steps simply vanish, so k = T
        # reaches the horizon from every t
        diff = dp_k_advantage(mdp, mu, pi, T) - q_pi
        endpoint_T = max(endpoint_T, float(np.max(np.abs(diff))))
    return [
        IdentityCheck("k-step performance difference residual", pdl, 1e-10),
        IdentityCheck("k=1 advantage equals A^mu", endpoint_1, 1e-12),
        IdentityCheck("k=T advantage equals Q^pi - V^mu", endpoint_T, 1e-12),
    ]
