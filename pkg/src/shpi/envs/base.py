"""Batched environment core and the single-instance interface built on it.

Every environment is written once as a batch of ``n`` independent copies
whose state is a dict of arrays with leading dimension ``n``.  Rollout-heavy
code (data collection, Monte Carlo advantages, evaluation) works on the batch
directly; :class:`Env` wraps a batch of one for the step-by-step interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np


class EnvError(RuntimeError):
    """Raised for invalid environment usage (stepping a finished episode, bad actions)."""


@dataclass(frozen=True)
class EnvStep:
    next_context: np.ndarray
    reward: float
    done: bool


Snapshot = dict[str, np.ndarray]


class BatchEnv:
    """Base class: subclasses define ``_initial``, ``_transition`` and ``_observe``."""

    action_count: int
    context_dim: int
    horizon: int

    def __init__(self):
        self.state: dict[str, np.ndarray] = {}

    # subclass hooks --------------------------------------------------------

    def _initial(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def _transition(
        self, state: dict[str, np.ndarray], actions: np.ndarray, rng: np.random.Generator
    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
        raise NotImplementedError

    def _observe(self, state: dict[str, np.ndarray]) -> np.ndarray:
        raise NotImplementedError

    # public batch API ------------------------------------------------------

    @property
    def n(self) -> int:
        return len(self.state["t"]) if self.state else 0

    @property
    def t(self) -> np.ndarray:
        return self.state["t"]

    @property
    def done(self) -> np.ndarray:
        return self.state["t"] >= self.horizon

    def reset(self, n: int, rng: np.random.Generator) -> np.ndarray:
        state = self._initial(n, rng)
        state["t"] = np.zeros(n, dtype=np.int64)
        self.state = state
        return self.observe()

    def observe(self) -> np.ndarray:
        return self._observe(self.state)

    def step(
        self,
        actions: np.ndarray,
        rng: np.random.Generator,
        active: np.ndarray | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Advance every active row by one decision; returns ``(rewards, done)``.

        Inactive rows keep their state and receive reward 0.  Stepping an
        active row whose episode is finished raises :class:`EnvError`.
        """
        actions = np.asarray(actions, dtype=np.int64)
        n = self.n
        if actions.shape != (n,):
            raise EnvError(f"expected {n} actions, got shape {actions.shape}")
        act = np.ones(n, dtype=bool) if active is None else np.asarray(active, dtype=bool)
        if np.any(act & self.done):
            raise EnvError("step called on a finished episode")
        if np.any(act & ((actions < 0) | (actions >= self.action_count))):
            raise EnvError(f"action outside [0, {self.action_count})")
        safe = np.where(act, actions, 0)
        new, rewards = self._transition(self.state, safe, rng)
        new["t"] = self.state["t"] + 1
        if act.all():
            self.state = new
        else:
            self.state = {
                k: np.where(act.reshape((-1,) + (1,) * (v.ndim - 1)), new[k], v)
                for k, v in self.state.items()
            }
            rewards = np.where(act, rewards, 0.0)
        return rewards, self.done

    def snapshot(self) -> list[Snapshot]:
        return [{k: v[i].copy() for k, v in self.state.items()} for i in range(self.n)]

    def restore(self, snaps: Sequence[Snapshot]) -> np.ndarray:
        if not snaps:
            raise EnvError("no snapshots to restore")
        keys = snaps[0].keys()
        self.state = {k: np.stack([s[k] for s in snaps]) for k in keys}
        return self.observe()


class Env:
    """Single-episode interface: ``reset(seed)``, ``step(action)``, snapshots."""

    def __init__(self, core: BatchEnv):
        self.core = core
        self._rng = np.random.default_rng(0)

    @property
    def action_count(self) -> int:
        return self.core.action_count

    @property
    def context_dim(self) -> int:
        return self.core.context_dim

    @property
    def horizon(self) -> int:
        return self.core.horizon

    @property
    def t(self) -> int:
        return int(self.core.t[0])

    def reset(self, seed: int | None = None) -> np.ndarray:
        self._rng = np.random.default_rng(seed)
        return self.core.reset(1, self._rng)[0]

    def step(self, action: int) -> EnvStep:
        if not self.core.state:
            raise EnvError("reset must be called before step")
        rewards, done = self.core.step(np.array([action]), self._rng)
        return EnvStep(self.core.observe()[0], float(rewards[0]), bool(done[0]))

    def get_state(self) -> Snapshot:
        return self.core.snapshot()[0]

    def set_state(self, snap: Snapshot) -> np.ndarray:
        return self.core.restore([snap])[0]


class SnapshotTrack:
    """Per-step snapshots of one episode stored column-wise (leading time axis)."""

    def __init__(self, columns: dict[str, np.ndarray]):
        self.columns = columns

    def __len__(self) -> int:
        return len(self.columns["t"])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return SnapshotTrack({k: v[i] for k, v in self.columns.items()})
        return {k: v[i].copy() for k, v in self.columns.items()}


def replicate(snaps: Sequence[Any], times: int) -> list[Any]:
    """Repeat each snapshot ``times`` times, keeping copies of one snapshot adjacent."""
    return [s for s in snaps for _ in range(times)]
