"""k-step advantage estimates: offline (clipped per-decision importance sampling)
and online (Monte Carlo rollouts from simulator snapshots), plus diagnostics.

The k-step advantage of taking ``a_t`` at ``x_t`` is the expected discounted
reward of ``a_t`` followed by ``k - 1`` steps of ``pi``, plus the discounted
termination bonus ``V(x_{t+k})``, minus ``V(x_t)``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, DataError, Trajectory
from .envs.base import BatchEnv, Env, EnvError, replicate
from .policies import sample_actions

BONUS_WEIGHTS = ("reached", "literal")


@dataclass(frozen=True)
class ClipBounds:
    q1: float = 0.5
    q2: float = 2.0

    def __post_init__(self):
        if not 0 < self.q1 <= 1 <= self.q2:
            raise ValueError(f"clip bounds need 0 < q1 <= 1 <= q2, got ({self.q1}, {self.q2})")

    @classmethod
    def unclipped(cls) -> "ClipBounds":
        return cls(1e-300, np.inf)

    def __call__(self, w: np.ndarray) -> np.ndarray:
        return np.clip(w, self.q1, self.q2)


def importance_weight(
    pi: Callable[[np.ndarray], np.ndarray],
    trajectory: Trajectory,
    t1: int,
    t2: int,
    clip: ClipBounds | None = None,
) -> float:
    """Product of ``pi(a_m|x_m) / mu(a_m|x_m)`` for ``m = t1 .. t2``; 1 when ``t1 > t2``.

    Index ``len(trajectory)`` refers to the lookahead step.  The clip, when
    given, applies to the product.
    """
    if t1 > t2:
        return 1.0
    steps = list(trajectory.steps)
    if trajectory.lookahead is not None:
        steps.append(trajectory.lookahead)
    if t1 < 0 or t2 >= len(steps):
        raise IndexError(f"trajectory does not cover steps [{t1}, {t2}]")
    sel = steps[t1:t2 + 1]
    props = np.array([s.propensity for s in sel])
    if np.any(props <= 0):
        raise DataError("propensity <= 0")
    probs = pi(np.array([s.context for s in sel]))
    acts = np.array([s.action for s in sel])
    w = float(np.prod(probs[np.arange(len(sel)), acts] / props))
    return float(clip(w)) if clip is not None else w


@dataclass(frozen=True)
class AdvantageTable:
    """Regression targets: one row per usable (window, position)."""

    episode: np.ndarray
    window: np.ndarray
    t: np.ndarray
    time_index: np.ndarray
    contexts: np.ndarray
    actions: np.ndarray
    estimates: np.ndarray
    k: int
    gamma: float
    stats: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not np.all(np.isfinite(self.estimates)):
            raise ValueError("non-finite advantage estimate")

    def __len__(self) -> int:
        return len(self.estimates)

    def with_estimates(self, estimates: np.ndarray) -> "AdvantageTable":
        return replace(self, estimates=np.asarray(estimates, dtype=float))

    def dumps(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["episode_id", "t", "action", "estimate"])
        for e, t, a, v in zip(self.episode, self.time_index, self.actions, self.estimates):
            w.writerow([int(e), int(t), int(a), repr(float(v))])
        return buf.getvalue()


def offline_k_advantages(
    dataset: Dataset,
    pi: Callable[[np.ndarray], np.ndarray],
    value: Callable[[np.ndarray], np.ndarray],
    k: int,
    gamma: float | None = None,
    clip: ClipBounds | None = ClipBounds(),
    bonus_weight: str = "reached",
    per_factor: bool = False,
    reward_shift: float = 0.0,
    windows: np.ndarray | None = None,
    positions: int | None = None,
) -> AdvantageTable:
    """Clipped PDIS estimate of the k-step advantage at every usable position.

    Reward ``m`` carries the weight ``w_{t+1}^{t+m}`` (``m = 0`` has weight 1).
    The bonus carries ``w_{t+1}^{t+k-1}`` (``bonus_weight="reached"``: the
    ratios of the ``k - 1`` actions that lead to ``x_{t+k}``) or
    ``w_{t+1}^{t+k}`` (``"literal"``).  Each cumulative product is clipped into
    ``[q1, q2]``; with ``per_factor`` the single ratios are clipped instead.
    ``clip=None`` disables clipping.  Positions whose ``x_{t+k}`` falls
    outside the window (and its lookahead) are skipped.  ``windows`` and
    ``positions`` restrict the computation to a subset of windows and to
    the first ``positions`` positions of each.
    """
    W = dataset.window_length
    if not 1 <= k <= W:
        raise ValueError(f"k must lie in [1, W={W}], got {k}")
    if bonus_weight not in BONUS_WEIGHTS:
        raise ValueError(f"bonus_weight must be one of {BONUS_WEIGHTS}")
    g = dataset.gamma if gamma is None else gamma
    wd = dataset.windows
    sel = np.arange(len(dataset)) if windows is None else np.asarray(windows, dtype=np.int64)
    if len(sel) == 0:
        raise ValueError("empty dataset")
    ctx = wd["contexts"][sel]
    act = wd["actions"][sel]
    prop = wd["propensities"][sel]
    rew = wd["rewards"][sel] - reward_shift
    has_next = wd["has_next"][sel]
    if np.any(prop <= 0):
        raise DataError("propensity <= 0")
    N, S, d = ctx.shape
    flat = ctx.reshape(-1, d)
    probs = np.asarray(pi(flat)).reshape(N, S, -1)
    ratio = np.take_along_axis(probs, act[..., None], axis=2)[..., 0] / prop
    V = np.asarray(value(flat), dtype=float).reshape(N, S)
    disc = g ** np.arange(k + 1)
    lo, hi = (clip.q1, clip.q2) if clip is not None else (0.0, np.inf)

    rows = {"i": [], "t": [], "est": []}
    n_weights = n_clipped = 0
    last = W if positions is None else min(W, positions)
    for t in range(last):
        if t + k > W:
            break
        valid = np.ones(N, dtype=bool) if t + k < W else has_next.copy()
        if not valid.any():
            continue
        nw = k if bonus_weight == "literal" else k - 1
        r = ratio[:, t + 1:t + 1 + nw]
        if per_factor:
            cw = np.cumprod(np.clip(r, lo, hi), axis=1)
            clipped = np.clip(r, lo, hi) != r
        else:
            raw = np.cumprod(r, axis=1)
            cw = np.clip(raw, lo, hi)
            clipped = cw != raw
        n_weights += int(valid.sum()) * nw
        n_clipped += int(clipped[valid].sum())
        w = np.concatenate([np.ones((N, 1)), cw], axis=1)  # w[:, m] = w_{t+1}^{t+m}
        est = np.sum(w[:, :k] * disc[:k] * rew[:, t:t + k], axis=1)
        wb = w[:, k - 1] if bonus_weight == "reached" else w[:, k]
        est = est + disc[k] * wb * V[:, t + k] - V[:, t]
        idx = np.flatnonzero(valid)
        rows["i"].append(idx)
        rows["t"].append(np.full(len(idx), t))
        rows["est"].append(est[idx])
    if not rows["i"]:
        raise ValueError("no position admits a full k-step target")
    i = np.concatenate(rows["i"])
    t = np.concatenate(rows["t"])
    order = np.lexsort((t, i))
    i, t = i[order], t[order]
    est = np.concatenate(rows["est"])[order]
    ep_ids = np.array([ep.episode_id for ep in dataset.episodes], dtype=np.int64)
    starts = np.array([ep.start for ep in dataset.episodes], dtype=np.int64)
    src = wd["episode"][sel][i]
    return AdvantageTable(
        episode=ep_ids[src],
        window=sel[i],
        t=t,
        time_index=starts[src] + wd["offset"][sel][i] + t,
        contexts=ctx[i, t],
        actions=act[i, t],
        estimates=est,
        k=k,
        gamma=g,
        stats={"clipped_fraction": n_clipped / n_weights if n_weights else 0.0},
    )


# -- online (simulator) estimates ----------------------------------------------

def rollout_returns(
    env: BatchEnv,
    snapshots: Sequence,
    gamma: float,
    rng: np.random.Generator,
    first_actions: np.ndarray | None = None,
    head: Callable[[np.ndarray], np.ndarray] | None = None,
    head_steps: int = 0,
    tail: Callable[[np.ndarray], np.ndarray] | None = None,
    bonus: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Discounted returns from restored snapshots, one per snapshot.

    The first action is ``first_actions`` when given (else drawn from
    ``head``, or from ``tail`` when ``head_steps`` is 0); the remaining
    ``head_steps - 1`` actions come from ``head``.  After that either the
    ``bonus`` value of the reached context is credited, or ``tail`` runs to
    the end of the episode.  Finished episodes earn no bonus.
    """
    obs = env.restore(list(snapshots))
    n = len(obs)
    if first_actions is not None:
        head_steps = max(head_steps, 1)
    G = np.zeros(n)
    disc = np.ones(n)
    steps = 0
    while not env.done.all():
        if steps < head_steps:
            policy = head
        elif bonus is None and tail is not None:
            policy = tail
        else:
            break
        if steps == 0 and first_actions is not None:
            a = np.asarray(first_actions, dtype=np.int64)
        else:
            a = sample_actions(policy(obs), rng)
        active = ~env.done
        r, _ = env.step(a, rng, active)
        G += disc * r
        disc = np.where(active, disc * gamma, disc)
        obs = env.observe()
        steps += 1
    if bonus is not None:
        G += np.where(env.done, 0.0, disc * np.asarray(bonus(obs)))
    return G


def online_k_advantages(
    env: BatchEnv,
    snapshots: Sequence,
    actions: np.ndarray,
    pi: Callable[[np.ndarray], np.ndarray],
    value: Callable[[np.ndarray], np.ndarray],
    k: int,
    gamma: float,
    n_rollouts: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo k-step advantages for a batch of (state, action) pairs.

    Returns the per-pair mean and its standard error over ``n_rollouts``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    M = len(snapshots)
    if M == 0:
        return np.zeros(0), np.zeros(0)
    base = np.asarray(value(env.restore(list(snapshots))))
    reps = replicate(snapshots, n_rollouts)
    acts = np.repeat(np.asarray(actions, dtype=np.int64), n_rollouts)
    G = rollout_returns(env, reps, gamma, rng, acts, head=pi, head_steps=k, bonus=value)
    G = G.reshape(M, n_rollouts)
    se = G.std(axis=1, ddof=1) / np.sqrt(n_rollouts) if n_rollouts > 1 else np.zeros(M)
    return G.mean(axis=1) - base, se


def online_k_advantage(
    env: Env,
    pi: Callable[[np.ndarray], np.ndarray],
    value: Callable[[np.ndarray], np.ndarray],
    state,
    action: int,
    k: int,
    gamma: float,
    n_rollouts: int,
    seed: int = 0,
) -> float:
    """Monte Carlo k-step advantage of ``action`` at the snapshot ``state``."""
    if state is None:
        raise EnvError("no simulator snapshot for the requested state")
    mean, _ = online_k_advantages(
        env.core, [state], np.array([action]), pi, value, k, gamma, n_rollouts,
        np.random.default_rng(seed),
    )
    return float(mean[0])


# -- diagnostics ----------------------------------------------------------------

def advantage_mse_diagnostic(
    env: BatchEnv,
    dataset: Dataset,
    pi: Callable[[np.ndarray], np.ndarray],
    mu: Callable[[np.ndarray], np.ndarray],
    value: Callable[[np.ndarray], np.ndarray],
    k_list: Sequence[int],
    gamma: float | None = None,
    n_truth_rollouts: int = 30,
    n_probes: int = 200,
    clip: ClipBounds | None = ClipBounds(),
    seed: int = 0,
    bonus_weight: str = "reached",
    reward_shift: float = 0.0,
    truth: str = "full",
) -> list[dict]:
    """MSE of offline k-step estimates against simulator ground truth.

    Probes are window starts drawn from the dataset, so every ``k <= W`` is
    defined at each of them (for ``k = W`` only windows followed by a logged
    step qualify).  Ground truth values come from
    ``n_truth_rollouts`` simulator rollouts per probe and subtract the
    ``mu`` return from ``x_t``.  With ``truth="full"`` every k is scored
    against one target, ``a_t`` followed by ``pi`` to the end of the
    episode, i.e. ``Q^pi(x_t, a_t) - V^mu(x_t)``.  With ``truth="per-k"``
    each k is scored against its own target: ``a_t``, then ``k - 1`` steps of
    ``pi``, then ``mu`` to the end (the exact behavior value in place of the
    fitted bonus).
    """
    if truth not in ("full", "per-k"):
        raise ValueError(f"truth must be 'full' or 'per-k', got {truth!r}")
    g = dataset.gamma if gamma is None else gamma
    rng = np.random.default_rng(seed)
    # k = W needs the step after the window, which the last window of an episode may lack
    eligible = np.arange(len(dataset))
    if max(k_list) >= dataset.window_length:
        eligible = eligible[dataset.windows["has_next"]]
    if len(eligible) == 0:
        raise DataError(f"no window supports k={max(k_list)}")
    n_probes = min(n_probes, len(eligible))
    probes = np.sort(rng.choice(eligible, size=n_probes, replace=False))
    snaps = [dataset.step_snapshot(i, 0) for i in probes]
    if any(s is None for s in snaps):
        raise EnvError("dataset carries no simulator snapshots")
    actions = dataset.windows["actions"][probes, 0]
    R = n_truth_rollouts
    reps = replicate(snaps, R)
    first = np.repeat(actions, R)
    base = rollout_returns(env, reps, g, rng, tail=mu).reshape(n_probes, R).mean(axis=1)
    if truth == "full":
        q = rollout_returns(env, reps, g, rng, first, head=pi, head_steps=env.horizon)
        target = q.reshape(n_probes, R).mean(axis=1) - base
    out = []
    for k in k_list:
        if truth == "per-k":
            q = rollout_returns(env, reps, g, rng, first, head=pi, head_steps=k, tail=mu)
            target = q.reshape(n_probes, R).mean(axis=1) - base
        table = offline_k_advantages(
            dataset, pi, value, k, g, clip, bonus_weight,
            reward_shift=reward_shift, windows=probes, positions=1,
        )
        err2 = (table.estimates - target) ** 2
        out.append({
            "k": int(k),
            "mse": float(err2.mean()),
            "stderr": float(err2.std(ddof=1) / np.sqrt(len(err2))) if len(err2) > 1 else 0.0,
        })
    return out


def mse_rows_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "mse", "stderr"])
    for r in rows:
        w.writerow([r["k"], repr(r["mse"]), repr(r["stderr"])])
    return buf.getvalue()


def bias_bound(
    k: int,
    gamma: float,
    t: int,
    T: int,
    q2: float,
    eps_r: float,
    eps_w: float,
    eps_V_t: float,
    eps_V_tk: float,
    r_max: float,
) -> float:
    """Upper bound on the bias of the clipped k-step estimator.

    ``eps_r``, ``eps_w`` are the worst reward and weight errors over the k
    reward terms, ``eps_V_t`` and ``eps_V_tk`` the value errors at ``x_t``
    and ``x_{t+k}``.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("the bound needs gamma in [0, 1)")
    if min(eps_r, eps_w, eps_V_t, eps_V_tk) < 0:
        raise ValueError("error magnitudes must be nonnegative")
    gk = gamma**k
    return (
        (1 - gk) / (1 - gamma) * q2 * eps_r
        + (1 - gk + gamma ** (t + k) - gamma ** (T + 1)) / (1 - gamma) * abs(r_max) * eps_w
        + gk * q2 * eps_V_tk
        + eps_V_t
    )
