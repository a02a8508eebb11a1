"""Termination-bonus models: fitting ``V^mu`` by Bellman residual descent, and backshift.

The value model is stationary (no time index) and is fitted on all
consecutive logged pairs ``(x, r, x')`` of a windowed dataset.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .approximator import Optimizer, Regressor, make_regressor, set_scaling
from .data import Dataset


@dataclass(frozen=True)
class ValueModel:
    regressor: Regressor
    gamma: float

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.regressor.predict(x)[..., 0]

    @property
    def input_dim(self) -> int:
        return self.regressor.input_dim

    def dumps(self) -> str:
        return json.dumps({"gamma": self.gamma, "regressor": self.regressor.to_dict()})

    @classmethod
    def loads(cls, text: str) -> "ValueModel":
        d = json.loads(text)
        return cls(Regressor.from_dict(d["regressor"]), float(d["gamma"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "ValueModel":
        return cls.loads(Path(path).read_text())


def zero_value(input_dim: int, gamma: float = 0.99) -> ValueModel:
    """The all-zero bonus used by session-RL and bandit degenerate modes."""
    return ValueModel(make_regressor(input_dim, 1, (), seed=None), gamma)


def constant_value(input_dim: int, c: float, gamma: float = 0.99) -> ValueModel:
    reg = make_regressor(input_dim, 1, (), seed=None)
    reg.y_shift = np.array([float(c)])
    return ValueModel(reg, gamma)


def fit_value(
    dataset: Dataset,
    model_init: Regressor | None = None,
    optimizer: Optimizer | None = None,
    epochs: int = 30,
    seed: int = 0,
    batch_size: int = 256,
    residual: str = "semi",
    reward_shift: float = 0.0,
    hidden: tuple[int, ...] = (32, 32),
    history: list[float] | None = None,
) -> ValueModel:
    """Fit ``V`` by minimizing ``sum (r + gamma V(x') - V(x))^2`` over logged pairs.

    ``residual="semi"`` treats the bootstrap target as a constant (TD(0));
    ``"full"`` differentiates through ``V(x')`` as well.  ``reward_shift`` is
    subtracted from every reward before fitting.  ``history`` receives the
    mean squared Bellman residual after each epoch.
    """
    if residual not in ("semi", "full"):
        raise ValueError(f"residual must be 'semi' or 'full', got {residual!r}")
    if dataset.window_length < 2 and not np.any(dataset.windows["has_next"]):
        raise ValueError("value fitting needs at least 2 steps per trajectory")
    x, r, xn = dataset.transitions()
    if len(x) == 0:
        raise ValueError("dataset has no consecutive step pairs")
    r = r - reward_shift
    g = dataset.gamma
    if model_init is None:
        model = make_regressor(dataset.context_dim, 1, hidden, seed=seed)
        sd = float(np.std(r)) or 1.0
        set_scaling(
            model,
            np.concatenate([x, xn]),
            y_shift=float(np.mean(r)) / (1 - g) if g < 1 else 0.0,
            y_scale=sd / np.sqrt(max(1 - g * g, 1e-4)),
        )
    else:
        model = model_init.copy()
    opt = (optimizer or Optimizer()).init(model.n_params)
    cfg = opt.config
    rng = np.random.default_rng(seed)
    n = len(x)
    bs = min(batch_size, n)
    total = max(1, epochs * -(-n // bs))
    for _ in range(epochs):
        order = rng.permutation(n)
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            v_next = model.predict(xn[idx])[:, 0]
            target = r[idx] + g * v_next
            _, grad = model.loss_and_grad(x[idx], target)
            if residual == "full":
                res = model.predict(x[idx])[:, 0] - target
                _, g2 = model.loss_and_grad(xn[idx], v_next + g * res)
                grad = grad + g2
            lr = cfg.lr * (1.0 - (1.0 - cfg.anneal_to) * opt.step / total)
            model.params = opt.update(model.params, grad, lr)
        if history is not None:
            res = model.predict(x)[:, 0] - r - g * model.predict(xn)[:, 0]
            history.append(float(np.mean(res * res)))
    model.meta = {**model.meta, "reward_shift": reward_shift}
    return ValueModel(model, g)


def backshift_reward(value, x: np.ndarray, x_next: np.ndarray, gamma: float) -> np.ndarray | float:
    """Reward recovered from a value model: ``V(x) - gamma * V(x')``."""
    out = np.asarray(value(np.atleast_2d(x))) - gamma * np.asarray(value(np.atleast_2d(x_next)))
    return float(out[0]) if np.ndim(x) == 1 else out


def backshift_dataset(dataset: Dataset, value) -> Dataset:
    """Replace logged rewards by backshifted ones.

    The last step of each episode has no successor and is dropped.
    """
    g = dataset.gamma
    episodes = []
    for ep in dataset.episodes:
        if len(ep) < 2:
            continue
        r_hat = backshift_reward(value, ep.contexts[:-1], ep.contexts[1:], g)
        episodes.append(ep.truncated(len(ep) - 1).with_rewards(r_hat))
    return dataset.with_episodes(episodes)
