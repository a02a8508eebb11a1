"""Logged interaction data: steps, episodes, sliding windows and the CSV format.

A logged episode is one uninterrupted interaction stream.  Offline learners
never see episodes directly; they see fixed-length windows cut from the
stream every ``window_step`` steps.  Each window also carries the step that
immediately follows it in the stream (the *lookahead*), when there is one,
so that a full ``k = W`` target can still bootstrap from ``x_W``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed logged data."""


@dataclass(frozen=True)
class Step:
    context: np.ndarray
    action: int
    propensity: float
    reward: float
    time_index: int = 0
    # simulator state at the time the context was observed; never serialized
    snapshot: Any = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.propensity > 0:
            raise DataError(f"propensity must be > 0, got {self.propensity}")
        if self.action < 0:
            raise DataError(f"action must be nonnegative, got {self.action}")


@dataclass(frozen=True)
class Episode:
    """One logged stream stored column-wise.

    ``snapshots`` optionally holds one simulator snapshot per step; it is
    used by diagnostics that need to restart the simulator from a logged
    state and is dropped on serialization.
    """

    contexts: np.ndarray
    actions: np.ndarray
    propensities: np.ndarray
    rewards: np.ndarray
    episode_id: int = 0
    start: int = 0
    snapshots: tuple | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        n = len(self.actions)
        if self.contexts.ndim != 2 or len(self.contexts) != n:
            raise DataError("contexts must be a (length, d) array")
        if len(self.propensities) != n or len(self.rewards) != n:
            raise DataError("column lengths differ")
        if np.any(self.propensities <= 0):
            raise DataError("propensity <= 0 in logged episode")
        if not np.all(np.isfinite(self.contexts)):
            raise DataError("non-finite context entries")

    def __len__(self) -> int:
        return len(self.actions)

    @classmethod
    def from_steps(cls, steps: Sequence[Step], episode_id: int = 0) -> "Episode":
        if not steps:
            raise DataError("empty stream")
        snaps = tuple(s.snapshot for s in steps)
        return cls(
            contexts=np.array([np.asarray(s.context, dtype=float) for s in steps]),
            actions=np.array([s.action for s in steps], dtype=np.int64),
            propensities=np.array([s.propensity for s in steps], dtype=float),
            rewards=np.array([s.reward for s in steps], dtype=float),
            episode_id=episode_id,
            start=steps[0].time_index,
            snapshots=None if all(s is None for s in snaps) else snaps,
        )

    def step(self, i: int) -> Step:
        return Step(
            context=self.contexts[i],
            action=int(self.actions[i]),
            propensity=float(self.propensities[i]),
            reward=float(self.rewards[i]),
            time_index=self.start + i,
            snapshot=None if self.snapshots is None else self.snapshots[i],
        )

    def with_rewards(self, rewards: np.ndarray) -> "Episode":
        return replace(self, rewards=np.asarray(rewards, dtype=float))

    def truncated(self, length: int) -> "Episode":
        return replace(
            self,
            contexts=self.contexts[:length],
            actions=self.actions[:length],
            propensities=self.propensities[:length],
            rewards=self.rewards[:length],
            snapshots=None if self.snapshots is None else self.snapshots[:length],
        )


@dataclass(frozen=True)
class Trajectory:
    """A length-``W`` window of an episode plus its optional lookahead step."""

    steps: tuple[Step, ...]
    source_offset: int
    episode_id: int = 0
    lookahead: Step | None = None

    def __len__(self) -> int:
        return len(self.steps)


@dataclass(frozen=True)
class Dataset:
    """Windowed batch of logged episodes.

    The window tensors have a trailing slot (index ``W``) for the lookahead
    step; ``has_next`` marks which windows actually have one.
    """

    episodes: tuple[Episode, ...]
    window_length: int
    window_step: int
    gamma: float = 0.99
    action_count: int = 0

    def __post_init__(self):
        if self.window_length < 1 or self.window_step < 1:
            raise DataError("window length and step must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise DataError(f"gamma must lie in [0, 1], got {self.gamma}")
        dims = {ep.contexts.shape[1] for ep in self.episodes}
        if len(dims) > 1:
            raise DataError(f"inconsistent context dimensions {sorted(dims)}")
        if self.action_count == 0:
            n = max((int(ep.actions.max()) + 1 for ep in self.episodes if len(ep)), default=1)
            object.__setattr__(self, "action_count", n)
        for ep in self.episodes:
            if len(ep) and ep.actions.max() >= self.action_count:
                raise DataError("logged action outside the action set")

    @property
    def context_dim(self) -> int:
        return self.episodes[0].contexts.shape[1]

    @cached_property
    def _index(self) -> tuple[np.ndarray, np.ndarray]:
        eps, offs = [], []
        W, delta = self.window_length, self.window_step
        for e, ep in enumerate(self.episodes):
            for o in range(0, len(ep) - W + 1, delta):
                eps.append(e)
                offs.append(o)
        return np.array(eps, dtype=np.int64), np.array(offs, dtype=np.int64)

    def __len__(self) -> int:
        return len(self._index[0])

    @cached_property
    def windows(self) -> dict[str, np.ndarray]:
        """Stacked window arrays of shape ``(N, W + 1, ...)``."""
        W = self.window_length
        ep_idx, offs = self._index
        N, d = len(ep_idx), self.context_dim
        ctx = np.zeros((N, W + 1, d))
        act = np.zeros((N, W + 1), dtype=np.int64)
        prop = np.ones((N, W + 1))
        rew = np.zeros((N, W + 1))
        has_next = np.zeros(N, dtype=bool)
        for i, (e, o) in enumerate(zip(ep_idx, offs)):
            ep = self.episodes[e]
            stop = min(o + W + 1, len(ep))
            n = stop - o
            ctx[i, :n] = ep.contexts[o:stop]
            act[i, :n] = ep.actions[o:stop]
            prop[i, :n] = ep.propensities[o:stop]
            rew[i, :n] = ep.rewards[o:stop]
            has_next[i] = n == W + 1
        for arr in (ctx, act, prop, rew, has_next):
            arr.setflags(write=False)
        return {
            "contexts": ctx,
            "actions": act,
            "propensities": prop,
            "rewards": rew,
            "has_next": has_next,
            "episode": ep_idx,
            "offset": offs,
        }

    @property
    def trajectories(self) -> list[Trajectory]:
        out = []
        W = self.window_length
        for e, o in zip(*self._index):
            ep = self.episodes[e]
            steps = tuple(ep.step(i) for i in range(o, o + W))
            look = ep.step(o + W) if o + W < len(ep) else None
            out.append(Trajectory(steps, int(ep.start + o), ep.episode_id, look))
        return out

    def step_snapshot(self, window: int, t: int):
        e, o = self._index[0][window], self._index[1][window]
        snaps = self.episodes[e].snapshots
        return None if snaps is None else snaps[o + t]

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All ``(x, r, x')`` pairs inside windows, including the lookahead edge.

        The last step of a window without a lookahead has no successor and is
        left out.  Overlapping windows repeat transitions on purpose.
        """
        w = self.windows
        W = self.window_length
        x = w["contexts"][:, :W].reshape(-1, self.context_dim)
        r = w["rewards"][:, :W].reshape(-1)
        x_next = w["contexts"][:, 1:].reshape(-1, self.context_dim)
        keep = np.ones((len(self), W), dtype=bool)
        keep[:, -1] = w["has_next"]
        keep = keep.reshape(-1)
        return x[keep], r[keep], x_next[keep]

    def with_episodes(self, episodes: Iterable[Episode]) -> "Dataset":
        return replace(self, episodes=tuple(episodes))


def window_episodes(
    episodes: Sequence[Episode],
    W: int,
    delta: int,
    gamma: float = 0.99,
    action_count: int = 0,
) -> Dataset:
    return Dataset(tuple(episodes), W, delta, gamma, action_count)


def window_stream(
    stream: Sequence[Step],
    W: int,
    delta: int,
    gamma: float = 0.99,
    action_count: int = 0,
) -> Dataset:
    """Cut one logged stream into windows of length ``W`` every ``delta`` steps."""
    if W < 1 or delta < 1:
        raise DataError("window length and step must be >= 1")
    if len(stream) < W:
        raise DataError(f"stream too short: {len(stream)} steps for window {W}")
    return window_episodes([Episode.from_steps(stream)], W, delta, gamma, action_count)


# -- CSV format ---------------------------------------------------------------

def _header(d: int) -> list[str]:
    return ["episode_id", "t", "action", "propensity", "reward"] + [f"x_{i}" for i in range(d)]


def dumps_episodes(episodes: Sequence[Episode]) -> str:
    """Serialize episodes, one step per line, floats in round-trip precision."""
    buf = io.StringIO()
    d = episodes[0].contexts.shape[1] if episodes else 0
    buf.write(",".join(_header(d)) + "\n")
    for ep in episodes:
        for i in range(len(ep)):
            row = [str(ep.episode_id), str(ep.start + i), str(int(ep.actions[i])),
                   repr(float(ep.propensities[i])), repr(float(ep.rewards[i]))]
            row += [repr(float(v)) for v in ep.contexts[i]]
            buf.write(",".join(row) + "\n")
    return buf.getvalue()


def loads_episodes(text: str) -> list[Episode]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or header[:5] != _header(0):
        raise DataError("missing or malformed header")
    d = len(header) - 5
    grouped: dict[int, list[list[str]]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != d + 5:
            raise DataError(f"line {lineno}: expected {d + 5} fields, got {len(row)}")
        if not float(row[3]) > 0:
            raise DataError(f"line {lineno}: propensity must be > 0")
        grouped.setdefault(int(row[0]), []).append(row)
    episodes = []
    for eid, rows in grouped.items():
        ts = [int(r[1]) for r in rows]
        if ts != list(range(ts[0], ts[0] + len(ts))):
            raise DataError(f"episode {eid}: time indices are not consecutive")
        episodes.append(Episode(
            contexts=np.array([[float(v) for v in r[5:]] for r in rows]).reshape(len(rows), d),
            actions=np.array([int(r[2]) for r in rows], dtype=np.int64),
            propensities=np.array([float(r[3]) for r in rows]),
            rewards=np.array([float(r[4]) for r in rows]),
            episode_id=eid,
            start=ts[0],
        ))
    return episodes


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_episodes(dataset.episodes))


def load_dataset(
    path: str | Path, W: int, delta: int, gamma: float = 0.99, action_count: int = 0
) -> Dataset:
    return window_episodes(loads_episodes(Path(path).read_text()), W, delta, gamma, action_count)
