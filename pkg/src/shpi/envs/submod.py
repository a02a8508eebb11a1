"""Item recommendation with a monotone submodular long-term value.

Each episode draws a latent user vector.  Recommending item ``j`` yields a
click with probability ``sigmoid((sqrt(D) <u, e_j> + b_j) / temperature)``.
The long-term value of the clicked set ``S`` is ``omega . max(0, max_{j in S} e_j)``
(coordinatewise max, the empty set giving the zero vector); each step emits
the increment of that value, so the undiscounted return equals the final
value.  The policy observes the running max vector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import BatchEnv, Env


@dataclass(frozen=True)
class SubmodEnvConfig:
    n_items: int = 100
    embed_dim: int = 100
    temperature: float = 1.0
    horizon: int = 200
    seed: int = 0
    omega: tuple[float, ...] | None = None
    user_scale: float = 3.0

    def __post_init__(self):
        if self.n_items < 1 or self.embed_dim < 1 or self.horizon < 1:
            raise ValueError("n_items, embed_dim and horizon must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.omega is not None:
            if len(self.omega) != self.embed_dim:
                raise ValueError("omega must have embed_dim entries")
            if min(self.omega) < 0:
                raise ValueError("omega entries must be nonnegative")


def submodular_value(embeddings: np.ndarray, omega: np.ndarray) -> float:
    """``omega . max(0, coordinatewise max of embeddings)``; 0 for an empty set."""
    e = np.asarray(embeddings, dtype=float).reshape(-1, len(omega))
    m = np.maximum(e.max(axis=0), 0.0) if len(e) else np.zeros(len(omega))
    return float(np.dot(omega, m))


class SubmodEnv(BatchEnv):
    def __init__(
        self,
        config: SubmodEnvConfig = SubmodEnvConfig(),
        embeddings: np.ndarray | None = None,
        click_bias: np.ndarray | None = None,
    ):
        super().__init__()
        c = config
        self.config = c
        self.action_count = c.n_items
        self.context_dim = c.embed_dim
        self.horizon = c.horizon
        rng = np.random.default_rng(c.seed)
        if embeddings is None:
            embeddings = rng.standard_normal((c.n_items, c.embed_dim)) / np.sqrt(c.embed_dim)
        self.embeddings = np.asarray(embeddings, dtype=float)
        if self.embeddings.shape != (c.n_items, c.embed_dim):
            raise ValueError("embeddings must have shape (n_items, embed_dim)")
        self.omega = (rng.uniform(0.0, 1.0, c.embed_dim) if c.omega is None
                      else np.asarray(c.omega, dtype=float))
        self.click_bias = (rng.normal(-1.0, 0.5, c.n_items) if click_bias is None
                           else np.asarray(click_bias, dtype=float))

    def _initial(self, n, rng):
        D = self.config.embed_dim
        return {
            "user": self.config.user_scale * rng.standard_normal((n, D)) / np.sqrt(D),
            "m": np.zeros((n, D)),
        }

    def click_prob(self, user: np.ndarray, items: np.ndarray) -> np.ndarray:
        D = self.config.embed_dim
        logit = (np.sum(user * self.embeddings[items], axis=1) * np.sqrt(D) + self.click_bias[items])
        # tanh form of the logistic function does not overflow for large logits
        return 0.5 * (1.0 + np.tanh(0.5 * logit / self.config.temperature))

    def _transition(self, state, actions, rng):
        p = self.click_prob(state["user"], actions)
        click = rng.random(len(actions)) < p
        m = state["m"]
        m_new = np.where(click[:, None], np.maximum(m, self.embeddings[actions]), m)
        reward = (m_new - m) @ self.omega
        return {"user": state["user"], "m": m_new}, reward

    def _observe(self, state):
        return state["m"].copy()

    def value(self) -> np.ndarray:
        return self.state["m"] @ self.omega


def make_submod(config: SubmodEnvConfig = SubmodEnvConfig()) -> Env:
    return Env(SubmodEnv(config))
