"""Toy recommendation task on the Styblinski-Tang surface.

Each action adds a fixed random vector to a latent user state ``W``; the
latent state is an average over the last ``tau`` (state + action) pairs and
the observed context ``X`` averages the last ``rho`` latent states.  The
reward is the negated Styblinski-Tang value of the new context divided by
``d``, so higher is better and the optimum sits near ``x_i = -2.9035``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import BatchEnv, Env


def styblinski_tang(x: np.ndarray) -> np.ndarray | float:
    """``0.5 * sum(x^4 - 16 x^2 + 5 x)`` over the last axis."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == 0:
        raise ValueError("styblinski_tang needs a nonempty vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("styblinski_tang needs finite input")
    out = 0.5 * np.sum(x**4 - 16.0 * x**2 + 5.0 * x, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class SynthEnvConfig:
    d: int = 2
    n_actions: int = 10
    tau: int = 2
    rho: int = 3
    horizon: int = 150
    seed: int = 0
    action_scale: float = 0.3
    start_offset: float = -10.0
    # subtract the mean action vector so a uniform policy has no drift
    center_actions: bool = True

    def __post_init__(self):
        for name in ("d", "n_actions", "tau", "rho", "horizon"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class SyntheticEnv(BatchEnv):
    def __init__(self, config: SynthEnvConfig = SynthEnvConfig(), action_vectors: np.ndarray | None = None):
        super().__init__()
        self.config = config
        self.action_count = config.n_actions
        self.context_dim = config.d
        self.horizon = config.horizon
        if action_vectors is None:
            rng = np.random.default_rng(config.seed)
            action_vectors = config.action_scale * rng.standard_normal((config.n_actions, config.d))
            if config.center_actions:
                action_vectors = action_vectors - action_vectors.mean(axis=0)
        self.action_vectors = np.asarray(action_vectors, dtype=float)
        if self.action_vectors.shape != (config.n_actions, config.d):
            raise ValueError("action_vectors must have shape (n_actions, d)")
        self.action_vectors.setflags(write=False)
        self._depth = max(config.tau, config.rho)

    def _initial(self, n, rng):
        c = self.config
        mu0 = np.zeros((n, c.d))
        mu0[np.arange(n), rng.integers(0, c.d, size=n)] = c.start_offset
        draws = mu0[:, None, :] + rng.standard_normal((n, c.tau, c.d))
        # pad the history with the oldest draw when rho > tau
        pad = np.repeat(draws[:, :1], self._depth - c.tau, axis=1)
        return {
            "w": np.concatenate([pad, draws], axis=1),
            "a": np.zeros((n, c.tau, c.d)),
        }

    def _transition(self, state, actions, rng):
        c = self.config
        a = np.concatenate([state["a"][:, 1:], self.action_vectors[actions][:, None]], axis=1)
        w_new = np.mean(state["w"][:, -c.tau:] + a, axis=1)
        w = np.concatenate([state["w"][:, 1:], w_new[:, None]], axis=1)
        x = w[:, -c.rho:].mean(axis=1)
        return {"w": w, "a": a}, -styblinski_tang(x) / c.d

    def _observe(self, state):
        return state["w"][:, -self.config.rho:].mean(axis=1)


def make_synthetic(config: SynthEnvConfig = SynthEnvConfig()) -> Env:
    return Env(SyntheticEnv(config))
