"""Finite-horizon tabular MDPs and exact dynamic-programming routines.

Everything here is exact (no sampling) and serves as the ground truth that
the sample-based estimators are checked against.  Value arrays are
time-indexed with shape ``(T + 1, S)`` and a zero terminal row; action-value
arrays have shape ``(T, S, A)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Episode

_TOL = 1e-12


@dataclass(frozen=True)
class TabularMDP:
    transition: np.ndarray  # (S, A, S)
    reward: np.ndarray  # (S, A)
    initial_dist: np.ndarray  # (S,)
    horizon: int
    gamma: float

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        R = np.asarray(self.reward, dtype=float)
        p0 = np.asarray(self.initial_dist, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError("transition must have shape (S, A, S)")
        if R.shape != P.shape[:2]:
            raise ValueError("reward must have shape (S, A)")
        if p0.shape != (P.shape[0],):
            raise ValueError("initial_dist must have shape (S,)")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1)) > _TOL:
            raise ValueError("transition rows must be probability vectors")
        if np.any(p0 < 0) or abs(p0.sum() - 1) > _TOL:
            raise ValueError("initial_dist must be a probability vector")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        for name, arr in (("transition", P), ("reward", R), ("initial_dist", p0)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]


@dataclass(frozen=True)
class TabularPolicy:
    """Action probabilities, either stationary ``(S, A)`` or per step ``(T, S, A)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim not in (2, 3):
            raise ValueError("probs must have shape (S, A) or (T, S, A)")
        if np.any(p < 0) or np.max(np.abs(p.sum(-1) - 1)) > _TOL:
            raise ValueError("policy rows must be probability vectors")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def n_actions(self) -> int:
        return self.probs.shape[-1]

    def at(self, t: int) -> np.ndarray:
        if self.probs.ndim == 2:
            return self.probs
        return self.probs[min(t, len(self.probs) - 1)]

    def stacked(self, horizon: int) -> np.ndarray:
        if self.probs.ndim == 2:
            return np.broadcast_to(self.probs, (horizon,) + self.probs.shape)
        if len(self.probs) < horizon:
            raise ValueError(f"policy covers {len(self.probs)} steps, horizon is {horizon}")
        return self.probs[:horizon]

    @classmethod
    def deterministic(cls, actions: np.ndarray, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions)
        return cls(np.eye(n_actions)[actions])


def _check(mdp: TabularMDP, *policies: TabularPolicy) -> None:
    for pol in policies:
        if pol.probs.shape[-2:] != (mdp.n_states, mdp.n_actions):
            raise ValueError(
                f"policy shape {pol.probs.shape} does not match MDP "
                f"({mdp.n_states} states, {mdp.n_actions} actions)"
            )
        if pol.probs.ndim == 3 and len(pol.probs) < mdp.horizon:
            raise ValueError("time-indexed policy shorter than the horizon")


def _backup(mdp: TabularMDP, pi: np.ndarray, H: np.ndarray, rewards: bool = True) -> np.ndarray:
    """One step of rolling ``pi`` forward: ``E_pi[R + gamma * H_{t+1}]`` per ``(t, s)``.

    Without rewards the backup is an undiscounted expectation of ``H_{t+1}``.
    Row ``T`` of the result is zero (nothing happens past the horizon).
    """
    T = mdp.horizon
    out = np.zeros_like(H)
    nxt = np.einsum("sap,tp->tsa", mdp.transition, H[1:])
    if rewards:
        q = mdp.reward[None] + mdp.gamma * nxt
    else:
        q = nxt
    out[:T] = np.einsum("tsa,tsa->ts", pi, q)
    return out


def dp_value(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Exact ``V[t, s]`` by backward induction, ``V[T] = 0``."""
    _check(mdp, policy)
    pi = policy.stacked(mdp.horizon)
    V = np.zeros((mdp.horizon + 1, mdp.n_states))
    for t in range(mdp.horizon - 1, -1, -1):
        q = mdp.reward + mdp.gamma * mdp.transition @ V[t + 1]
        V[t] = np.sum(pi[t] * q, axis=1)
    return V


def dp_value_stationary(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Infinite-horizon discounted value of a stationary policy (``gamma < 1``)."""
    _check(mdp, policy)
    if policy.probs.ndim != 2:
        raise ValueError("stationary evaluation needs an (S, A) policy")
    if mdp.gamma >= 1.0:
        raise ValueError("infinite-horizon evaluation needs gamma < 1")
    P_pi = np.einsum("sa,sap->sp", policy.probs, mdp.transition)
    r_pi = np.sum(policy.probs * mdp.reward, axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)


def dp_q(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    V = dp_value(mdp, policy)
    return mdp.reward[None] + mdp.gamma * np.einsum("sap,tp->tsa", mdp.transition, V[1:])


def dp_k_advantage(
    mdp: TabularMDP,
    mu: TabularPolicy,
    pi: TabularPolicy,
    k: int,
    bonus: np.ndarray | None = None,
) -> np.ndarray:
    """Exact k-step advantage ``A[t, s, a]``.

    Take ``a`` in ``s`` at time ``t``, follow ``pi`` for ``k - 1`` more steps,
    then collect the termination bonus; subtract the bonus at ``(t, s)``.
    The bonus defaults to the exact ``V^mu``; pass a ``(T + 1, S)`` array to
    evaluate the expectation with a corrupted value table instead.
    """
    _check(mdp, mu, pi)
    T = mdp.horizon
    if not 1 <= k <= T:
        raise ValueError(f"k must lie in [1, {T}], got {k}")
    V = dp_value(mdp, mu) if bonus is None else np.array(bonus, dtype=float)
    if V.shape != (T + 1, mdp.n_states):
        raise ValueError(f"bonus must have shape {(T + 1, mdp.n_states)}")
    V[T] = 0.0
    H = V
    pis = pi.stacked(T)
    for _ in range(k - 1):
        H = _backup(mdp, pis, H)
    nxt = np.einsum("sap,tp->tsa", mdp.transition, H[1:])
    return mdp.reward[None] + mdp.gamma * nxt - V[:T, :, None]


def state_distribution(mdp: TabularMDP, policy: TabularPolicy) -> np.ndarray:
    """Marginal state distribution ``d[t, s]`` for ``t = 0 .. T``."""
    _check(mdp, policy)
    pi = policy.stacked(mdp.horizon)
    d = np.zeros((mdp.horizon + 1, mdp.n_states))
    d[0] = mdp.initial_dist
    for t in range(mdp.horizon):
        d[t + 1] = np.einsum("s,sa,sap->p", d[t], pi[t], mdp.transition)
    return d


def pdl_terms(mdp: TabularMDP, mu: TabularPolicy, pi: TabularPolicy, k: int) -> dict[str, float]:
    """Both sides of the k-step performance-difference identity.

    Every per-step term carries the occupancy discount ``gamma ** t``; at
    ``gamma = 1`` this is the undiscounted statement.  ``lhs`` sums the
    value gap over ``t = 1 .. T-1``; ``advantage`` and ``correction`` are the
    two right-hand terms.
    """
    _check(mdp, mu, pi)
    T, g = mdp.horizon, mdp.gamma
    Vmu, Vpi = dp_value(mdp, mu), dp_value(mdp, pi)
    d = state_distribution(mdp, mu)[:T]
    disc = g ** np.arange(T)
    lhs = float(np.sum(disc[1:] * np.sum(d[1:] * (Vpi[1:T] - Vmu[1:T]), axis=1)))

    mus = mu.stacked(T)
    occ = d[:, :, None] * mus  # (T, S, A) joint of (x_t, a_t) under mu
    adv = dp_k_advantage(mdp, mu, pi, k)
    advantage = float(np.sum(disc[:, None, None] * occ * adv))

    Z = Vpi - Vmu
    Z[T] = 0.0
    pis = pi.stacked(T)
    for _ in range(k - 1):
        Z = _backup(mdp, pis, Z, rewards=False)
    reach = np.einsum("sap,tp->tsa", mdp.transition, Z[1:])
    correction = float(g**k * np.sum(disc[:, None, None] * occ * reach))
    return {"lhs": lhs, "advantage": advantage, "correction": correction}


def pdl_residual(mdp: TabularMDP, mu: TabularPolicy, pi: TabularPolicy, k: int) -> float:
    if not 1 <= k <= mdp.horizon:
        raise ValueError(f"k must lie in [1, {mdp.horizon}], got {k}")
    terms = pdl_terms(mdp, mu, pi, k)
    return abs(terms["lhs"] - terms["advantage"] - terms["correction"])


# -- random instances and sampling ---------------------------------------------

def random_mdp(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    horizon: int,
    gamma: float,
    concentration: float = 1.0,
) -> TabularMDP:
    P = rng.dirichlet(np.full(n_states, concentration), size=(n_states, n_actions))
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    p0 = rng.dirichlet(np.ones(n_states))
    return TabularMDP(P, R, p0, horizon, gamma)


def random_policy(
    rng: np.random.Generator,
    n_states: int,
    n_actions: int,
    horizon: int | None = None,
    concentration: float = 1.0,
) -> TabularPolicy:
    shape = (n_states,) if horizon is None else (horizon, n_states)
    return TabularPolicy(rng.dirichlet(np.full(n_actions, concentration), size=shape))


def uniform_policy(n_states: int, n_actions: int) -> TabularPolicy:
    return TabularPolicy(np.full((n_states, n_actions), 1.0 / n_actions))


def sample_paths(
    mdp: TabularMDP, policy: TabularPolicy, n: int, rng: np.random.Generator
) -> dict[str, np.ndarray]:
    """Sample ``n`` episodes; returns states ``(n, T + 1)`` and actions,
    propensities and rewards ``(n, T)``."""
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    pi = policy.stacked(T)
    states = np.zeros((n, T + 1), dtype=np.int64)
    actions = np.zeros((n, T), dtype=np.int64)
    props = np.zeros((n, T))
    cum_p0 = np.cumsum(mdp.initial_dist)
    states[:, 0] = np.minimum(np.searchsorted(cum_p0, rng.random(n), side="right"), S - 1)
    cum_P = np.cumsum(mdp.transition, axis=-1)
    for t in range(T):
        s = states[:, t]
        cum_pi = np.cumsum(pi[t][s], axis=1)
        a = np.minimum((rng.random((n, 1)) > cum_pi).sum(axis=1), A - 1)
        actions[:, t] = a
        props[:, t] = pi[t][s, a]
        nxt = (rng.random((n, 1)) > cum_P[s, a]).sum(axis=1)
        states[:, t + 1] = np.minimum(nxt, S - 1)
    rewards = mdp.reward[states[:, :T], actions]
    return {"states": states, "actions": actions, "propensities": props, "rewards": rewards}


# -- one-hot (time, state) contexts ------------------------------------------------

def tabular_contexts(states: np.ndarray, times: np.ndarray, n_states: int, horizon: int) -> np.ndarray:
    """One-hot encoding of ``(t, s)`` with dimension ``(T + 1) * S``."""
    states = np.asarray(states)
    idx = np.asarray(times) * n_states + states
    out = np.zeros(states.shape + ((horizon + 1) * n_states,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


def decode_contexts(contexts: np.ndarray, n_states: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.argmax(contexts, axis=-1)
    return idx // n_states, idx % n_states


def episodes_from_paths(
    paths: dict[str, np.ndarray],
    mdp: TabularMDP,
    mu: TabularPolicy,
    rng: np.random.Generator,
) -> list[Episode]:
    """Wrap sampled paths as logged episodes with one-hot ``(t, s)`` contexts.

    A terminal step at ``t = T`` is appended (reward 0, action drawn from
    ``mu``) so that windows covering the whole episode can reach ``x_T``.
    """
    T, S = mdp.horizon, mdp.n_states
    n = len(paths["states"])
    last = paths["states"][:, T]
    probs = mu.at(T - 1)[last]
    a_T = np.minimum((rng.random((n, 1)) > np.cumsum(probs, axis=1)).sum(axis=1), mdp.n_actions - 1)
    actions = np.concatenate([paths["actions"], a_T[:, None]], axis=1)
    props = np.concatenate([paths["propensities"], probs[np.arange(n), a_T][:, None]], axis=1)
    rewards = np.concatenate([paths["rewards"], np.zeros((n, 1))], axis=1)
    ctx = tabular_contexts(paths["states"], np.arange(T + 1)[None, :].repeat(n, 0), S, T)
    return [
        Episode(ctx[i], actions[i], props[i], rewards[i], episode_id=i)
        for i in range(n)
    ]


class TabularContextPolicy:
    """Adapter: evaluates a tabular policy on one-hot ``(t, s)`` contexts."""

    def __init__(self, policy: TabularPolicy, n_states: int, horizon: int):
        self.policy = policy
        self.n_states = n_states
        self.table = policy.stacked(horizon)
        self.n_actions = policy.n_actions

    def __call__(self, contexts: np.ndarray) -> np.ndarray:
        t, s = decode_contexts(contexts, self.n_states)
        t = np.minimum(t, len(self.table) - 1)
        return self.table[t, s]


class TabularValue:
    """Adapter: looks up a ``(T + 1, S)`` value table on one-hot contexts."""

    def __init__(self, table: np.ndarray, n_states: int):
        self.table = np.asarray(table, dtype=float)
        self.n_states = n_states

    def __call__(self, contexts: np.ndarray) -> np.ndarray:
        t, s = decode_contexts(contexts, self.n_states)
        return self.table[t, s]
