"""Stochastic policies over discrete actions.

A policy is any callable mapping a batch of contexts ``(n, d)`` to action
probabilities ``(n, A)``.  :class:`GreedyPolicy` is the one learned by the
improvement loops: the argmax of a per-action scorer, smoothed with
epsilon-uniform exploration.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .approximator import Regressor


class Policy(Protocol):
    n_actions: int

    def __call__(self, contexts: np.ndarray) -> np.ndarray: ...


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random((len(probs), 1)) * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


@dataclass(frozen=True)
class UniformPolicy:
    n_actions: int

    def __call__(self, contexts: np.ndarray) -> np.ndarray:
        n = len(np.atleast_2d(contexts))
        return np.full((n, self.n_actions), 1.0 / self.n_actions)


@dataclass(frozen=True)
class FunctionPolicy:
    """Wraps an arbitrary ``contexts -> probs`` function."""

    fn: Callable[[np.ndarray], np.ndarray]
    n_actions: int

    def __call__(self, contexts: np.ndarray) -> np.ndarray:
        return self.fn(np.atleast_2d(contexts))


@dataclass(frozen=True)
class GreedyPolicy:
    """Epsilon-greedy policy around a per-action scorer.

    Ties go to the lowest action index.  Propensities are
    ``epsilon / A + (1 - epsilon) * [a == argmax]``.
    """

    scorer: Regressor
    epsilon: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")

    @property
    def n_actions(self) -> int:
        return self.scorer.output_dim

    @property
    def zero_propensity_risk(self) -> bool:
        """True when non-greedy actions have probability 0 (unsafe for logging)."""
        return self.epsilon == 0.0 and self.n_actions > 1

    def scores(self, contexts: np.ndarray) -> np.ndarray:
        return self.scorer.predict(np.atleast_2d(contexts))

    def greedy_actions(self, contexts: np.ndarray) -> np.ndarray:
        return np.argmax(self.scores(contexts), axis=1)

    def __call__(self, contexts: np.ndarray) -> np.ndarray:
        a = self.greedy_actions(contexts)
        A = self.n_actions
        probs = np.full((len(a), A), self.epsilon / A)
        probs[np.arange(len(a)), a] += 1.0 - self.epsilon
        return probs

    def with_epsilon(self, epsilon: float) -> "GreedyPolicy":
        return GreedyPolicy(self.scorer, epsilon, dict(self.meta))

    def dumps(self) -> str:
        return json.dumps({"epsilon": self.epsilon, "meta": self.meta, "scorer": self.scorer.to_dict()})

    @classmethod
    def loads(cls, text: str) -> "GreedyPolicy":
        d = json.loads(text)
        return cls(Regressor.from_dict(d["scorer"]), float(d["epsilon"]), d.get("meta", {}))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "GreedyPolicy":
        return cls.loads(Path(path).read_text())


def corrupt_policy(policy: GreedyPolicy, epsilon: float) -> GreedyPolicy:
    """Epsilon-greedy corruption of a greedy policy; ``epsilon = 1`` is uniform."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    return policy.with_epsilon(epsilon)
