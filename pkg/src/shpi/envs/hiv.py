"""HIV treatment simulator: a six-compartment ODE integrated with fixed-step RK4.

State ``(T1, T2, T1*, T2*, V, E)``: healthy and infected CD4+ T cells and
macrophages, free virus, and cytotoxic T cells.  Action ``a`` selects the
drug efficacies ``(eps1, eps2)`` of a reverse-transcriptase and a protease
inhibitor.  The policy observes ``log10`` of the state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .base import BatchEnv, Env, EnvError

# (eps1, eps2) per action: none, RTI, PI, both
DRUG_EFFICACY = np.array([[0.0, 0.0], [0.7, 0.0], [0.0, 0.3], [0.7, 0.3]])

UNHEALTHY_STATE = np.array([163573.0, 5.0, 11945.0, 46.0, 63919.0, 24.0])


@dataclass(frozen=True)
class HivParams:
    lambda1: float = 1e4
    lambda2: float = 31.98
    d1: float = 0.01
    d2: float = 0.01
    f: float = 0.34
    k1: float = 8e-7
    k2: float = 1e-4
    delta: float = 0.7
    m1: float = 1e-5
    m2: float = 1e-5
    NT: float = 100.0
    c: float = 13.0
    rho1: float = 1.0
    rho2: float = 1.0
    lambdaE: float = 1.0
    bE: float = 0.3
    Kb: float = 100.0
    d_E: float = 0.25
    Kd: float = 500.0
    deltaE: float = 0.1

    def vector(self) -> np.ndarray:
        return np.array([
            self.lambda1, self.lambda2, self.d1, self.d2, self.f, self.k1, self.k2,
            self.delta, self.m1, self.m2, self.NT, self.c, self.rho1, self.rho2,
            self.lambdaE, self.bE, self.Kb, self.d_E, self.Kd, self.deltaE,
        ])


@dataclass(frozen=True)
class HivEnvConfig:
    horizon: int = 200
    interval: float = 5.0
    substeps: int = 1000
    log_floor: float = 1e-5
    # multiplicative jitter of the initial state; 0 starts every episode at UNHEALTHY_STATE
    init_noise: float = 0.0
    params: HivParams = field(default_factory=HivParams)


@numba.njit(cache=True)
def _deriv(s, eps1, eps2, p, out):
    lambda1, lambda2, d1, d2, f, k1, k2 = p[0], p[1], p[2], p[3], p[4], p[5], p[6]
    delta, m1, m2, NT, c, rho1, rho2 = p[7], p[8], p[9], p[10], p[11], p[12], p[13]
    lambdaE, bE, Kb, d_E, Kd, deltaE = p[14], p[15], p[16], p[17], p[18], p[19]
    T1, T2, T1s, T2s, V, E = s[0], s[1], s[2], s[3], s[4], s[5]
    inf1 = (1.0 - eps1) * k1 * V * T1
    inf2 = (1.0 - f * eps1) * k2 * V * T2
    out[0] = lambda1 - d1 * T1 - inf1
    out[1] = lambda2 - d2 * T2 - inf2
    out[2] = inf1 - delta * T1s - m1 * E * T1s
    out[3] = inf2 - delta * T2s - m2 * E * T2s
    out[4] = ((1.0 - eps2) * NT * delta * (T1s + T2s) - c * V
              - ((1.0 - eps1) * rho1 * k1 * T1 + (1.0 - f * eps1) * rho2 * k2 * T2) * V)
    Ts = T1s + T2s
    out[5] = lambdaE + bE * Ts / (Ts + Kb) * E - d_E * Ts / (Ts + Kd) * E - deltaE * E


@numba.njit(cache=True)
def _rk4_batch(states, eps, p, dt, substeps):
    n = states.shape[0]
    out = np.empty_like(states)
    h = dt / substeps
    k1 = np.empty(6)
    k2 = np.empty(6)
    k3 = np.empty(6)
    k4 = np.empty(6)
    tmp = np.empty(6)
    for i in range(n):
        s = states[i].copy()
        e1, e2 = eps[i, 0], eps[i, 1]
        for _ in range(substeps):
            _deriv(s, e1, e2, p, k1)
            for j in range(6):
                tmp[j] = s[j] + 0.5 * h * k1[j]
            _deriv(tmp, e1, e2, p, k2)
            for j in range(6):
                tmp[j] = s[j] + 0.5 * h * k2[j]
            _deriv(tmp, e1, e2, p, k3)
            for j in range(6):
                tmp[j] = s[j] + h * k3[j]
            _deriv(tmp, e1, e2, p, k4)
            for j in range(6):
                s[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        for j in range(6):
            out[i, j] = max(s[j], 0.0)
    return out


def hiv_derivative(state: np.ndarray, action: int, params: HivParams = HivParams()) -> np.ndarray:
    out = np.empty(6)
    e1, e2 = DRUG_EFFICACY[action]
    _deriv(np.asarray(state, dtype=float), e1, e2, params.vector(), out)
    return out


def hiv_reward(state: np.ndarray, action: np.ndarray | int) -> np.ndarray | float:
    """Penalize virus and drug use, reward immune response (state after the step)."""
    state = np.asarray(state, dtype=float)
    e = DRUG_EFFICACY[np.asarray(action)]
    return -0.1 * state[..., 4] - 2e4 * e[..., 0] ** 2 - 2e3 * e[..., 1] ** 2 + 1e3 * state[..., 5]


def hiv_step(state: np.ndarray, action: int, config: HivEnvConfig = HivEnvConfig()) -> tuple[np.ndarray, float]:
    """Integrate one decision interval from a raw state; returns ``(next_state, reward)``."""
    state = np.asarray(state, dtype=float)
    if state.shape != (6,) or not np.all(np.isfinite(state)):
        raise EnvError("HIV state must be six finite numbers")
    if not 0 <= action < 4:
        raise EnvError(f"action must lie in [0, 4), got {action}")
    nxt = _rk4_batch(state[None], DRUG_EFFICACY[[action]], config.params.vector(),
                     config.interval, config.substeps)[0]
    return nxt, float(hiv_reward(nxt, action))


class HivEnv(BatchEnv):
    action_count = 4
    context_dim = 6

    def __init__(self, config: HivEnvConfig = HivEnvConfig()):
        super().__init__()
        self.config = config
        self.horizon = config.horizon
        self._p = config.params.vector()

    def _initial(self, n, rng):
        s = np.repeat(UNHEALTHY_STATE[None], n, axis=0)
        if self.config.init_noise > 0:
            s = s * np.exp(self.config.init_noise * rng.standard_normal(s.shape))
        return {"x": s}

    def _transition(self, state, actions, rng):
        x = state["x"]
        if not np.all(np.isfinite(x)):
            raise EnvError("non-finite HIV state")
        nxt = _rk4_batch(x, DRUG_EFFICACY[actions], self._p, self.config.interval, self.config.substeps)
        return {"x": nxt}, hiv_reward(nxt, actions)

    def _observe(self, state):
        return np.log10(np.maximum(state["x"], self.config.log_floor))


def make_hiv(config: HivEnvConfig = HivEnvConfig()) -> Env:
    return Env(HivEnv(config))
