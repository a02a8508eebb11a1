"""Small numpy regressors: linear and ReLU feedforward, trained by minibatch SGD/Adam.

A :class:`Regressor` is a flat parameter vector plus an architecture header.
Inputs and outputs pass through fixed affine scalings (not trained) so the
same learning rate works across environments with very different units.
Multi-output models double as per-action heads: a ``mask`` selects which
outputs a sample supervises.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np


@dataclass
class Regressor:
    input_dim: int
    output_dim: int = 1
    hidden: tuple[int, ...] = ()
    params: np.ndarray | None = None
    x_shift: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    y_shift: np.ndarray | None = None
    y_scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        n = self.n_params
        if self.params is None:
            self.params = np.zeros(n)
        self.params = np.asarray(self.params, dtype=float)
        if self.params.shape != (n,):
            raise ValueError(f"expected {n} parameters for {self.architecture}, got {self.params.shape}")
        d, o = self.input_dim, self.output_dim
        self.x_shift = np.zeros(d) if self.x_shift is None else np.asarray(self.x_shift, dtype=float)
        self.x_scale = np.ones(d) if self.x_scale is None else np.asarray(self.x_scale, dtype=float)
        self.y_shift = np.zeros(o) if self.y_shift is None else np.asarray(self.y_shift, dtype=float)
        self.y_scale = np.ones(o) if self.y_scale is None else np.asarray(self.y_scale, dtype=float)

    @property
    def architecture(self) -> str:
        return "linear" if not self.hidden else "feedforward"

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def layers(self, params: np.ndarray | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views ``(W, b)`` into the flat parameter vector, layer by layer."""
        p = self.params if params is None else params
        out, i = [], 0
        s = self.sizes
        for a, b in zip(s[:-1], s[1:]):
            W = p[i:i + a * b].reshape(a, b)
            i += a * b
            out.append((W, p[i:i + b]))
            i += b
        return out

    def copy(self) -> "Regressor":
        return replace(
            self,
            params=self.params.copy(),
            x_shift=self.x_shift.copy(),
            x_scale=self.x_scale.copy(),
            y_shift=self.y_shift.copy(),
            y_scale=self.y_scale.copy(),
            meta=dict(self.meta),
        )

    # -- forward / backward ---------------------------------------------------

    def _normalize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"input has {x.shape[-1]} features, model expects {self.input_dim}")
        return (x - self.x_shift) / self.x_scale

    def _forward(self, xn: np.ndarray, params: np.ndarray | None = None):
        acts = [xn]
        h = xn
        layers = self.layers(params)
        for j, (W, b) in enumerate(layers):
            z = h @ W + b
            h = np.maximum(z, 0.0) if j < len(layers) - 1 else z
            acts.append(h)
        return acts

    def raw(self, x: np.ndarray) -> np.ndarray:
        """Network output in normalized target units."""
        return self._forward(self._normalize(x))[-1]

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass; ``(d,)`` input gives ``(output_dim,)``, ``(n, d)`` gives ``(n, output_dim)``."""
        return self.raw(x) * self.y_scale + self.y_shift

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = self.predict(x)
        return out[..., 0] if self.output_dim == 1 else out

    def loss_and_grad(
        self,
        x: np.ndarray,
        y: np.ndarray,
        weight: np.ndarray | None = None,
        mask: np.ndarray | None = None,
        loss: str = "squared",
        params: np.ndarray | None = None,
    ) -> tuple[float, np.ndarray]:
        """Weighted loss in normalized units and its gradient w.r.t. the flat parameters.

        ``squared``: ``sum_i w_i sum_j m_ij (f_ij - y_ij)^2 / (2 sum_i w_i)`` with
        ``y`` given in raw target units.  ``logistic``: binary cross-entropy
        on the logit output with ``y`` in {0, 1}.
        """
        p = self.params if params is None else params
        x = np.atleast_2d(x)
        n = len(x)
        y = np.asarray(y, dtype=float).reshape(n, -1)
        w = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
        m = np.ones((n, self.output_dim)) if mask is None else np.asarray(mask, dtype=float)
        total = w.sum()
        if total <= 0:
            return 0.0, np.zeros_like(p)
        acts = self._forward(self._normalize(x), p)
        out = acts[-1]
        wm = w[:, None] * m / total
        if loss == "squared":
            yn = (y - self.y_shift) / self.y_scale
            r = out - yn
            value = 0.5 * float(np.sum(wm * r * r))
            delta = wm * r
        elif loss == "logistic":
            value = float(np.sum(wm * (np.logaddexp(0.0, out) - y * out)))
            delta = wm * (0.5 * (1.0 + np.tanh(0.5 * out)) - y)
        else:
            raise ValueError(f"unknown loss {loss!r}")

        grads = []
        layers = self.layers(p)
        for j in range(len(layers) - 1, -1, -1):
            W, _ = layers[j]
            h = acts[j]
            grads.append((h.T @ delta, delta.sum(axis=0)))
            if j:
                delta = (delta @ W.T) * (acts[j] > 0)
        flat = np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in reversed(grads)])
        return value, flat

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict[str, Any]:
        return {
            "architecture": self.architecture,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "hidden": list(self.hidden),
            "params": self.params.tolist(),
            "x_shift": self.x_shift.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_shift": self.y_shift.tolist(),
            "y_scale": self.y_scale.tolist(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Regressor":
        return cls(
            input_dim=d["input_dim"],
            output_dim=d["output_dim"],
            hidden=tuple(d["hidden"]),
            params=np.array(d["params"], dtype=float),
            x_shift=np.array(d["x_shift"], dtype=float),
            x_scale=np.array(d["x_scale"], dtype=float),
            y_shift=np.array(d["y_shift"], dtype=float),
            y_scale=np.array(d["y_scale"], dtype=float),
            meta=dict(d.get("meta", {})),
        )

    def dumps(self) -> str:
        # json writes floats with repr(), which round-trips doubles exactly
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "Regressor":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "Regressor":
        return cls.loads(Path(path).read_text())


def make_regressor(
    input_dim: int,
    output_dim: int = 1,
    hidden: tuple[int, ...] = (32, 32),
    seed: int | None = 0,
) -> Regressor:
    """Glorot-uniform initialized model; ``seed=None`` gives all-zero parameters."""
    model = Regressor(input_dim, output_dim, tuple(hidden))
    if seed is None:
        return model
    rng = np.random.default_rng(seed)
    for W, b in model.layers():
        lim = np.sqrt(6.0 / (W.shape[0] + W.shape[1]))
        W[...] = rng.uniform(-lim, lim, size=W.shape)
        b[...] = 0.0
    return model


def set_scaling(
    model: Regressor,
    x: np.ndarray | None = None,
    y: np.ndarray | None = None,
    *,
    y_shift: float | None = None,
    y_scale: float | None = None,
) -> Regressor:
    """Fix input standardization from ``x`` and target scaling from ``y`` (in place)."""
    if x is not None:
        x = np.atleast_2d(x)
        sd = x.std(axis=0)
        model.x_shift = x.mean(axis=0)
        model.x_scale = np.where(sd > 1e-8, sd, 1.0)
    if y is not None:
        y = np.asarray(y, dtype=float)
        sd = float(np.std(y))
        model.y_shift = np.full(model.output_dim, float(np.mean(y)))
        model.y_scale = np.full(model.output_dim, sd if sd > 1e-8 else 1.0)
    if y_shift is not None:
        model.y_shift = np.full(model.output_dim, float(y_shift))
    if y_scale is not None:
        model.y_scale = np.full(model.output_dim, float(y_scale) if y_scale > 0 else 1.0)
    return model


# -- optimization ------------------------------------------------------------

@dataclass(frozen=True)
class Optimizer:
    method: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # final learning rate as a fraction of ``lr`` under linear decay; 1 = constant
    anneal_to: float = 1.0

    def __post_init__(self):
        if self.method not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.method!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def init(self, n_params: int) -> "OptimizerState":
        return OptimizerState(self, np.zeros(n_params), np.zeros(n_params))


@dataclass
class OptimizerState:
    config: Optimizer
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    def update(self, params: np.ndarray, grad: np.ndarray, lr: float | None = None) -> np.ndarray:
        c = self.config
        lr = c.lr if lr is None else lr
        self.step += 1
        if c.method == "sgd":
            return params - lr * grad
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mhat = self.m / (1 - c.beta1**self.step)
        vhat = self.v / (1 - c.beta2**self.step)
        return params - lr * mhat / (np.sqrt(vhat) + c.eps)


def _batches(n: int, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= n:
        yield np.arange(n)
        return
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def fit(
    model: Regressor,
    x: np.ndarray,
    y: np.ndarray,
    weight: np.ndarray | None = None,
    mask: np.ndarray | None = None,
    *,
    loss: str = "squared",
    optimizer: Optimizer | None = None,
    epochs: int = 50,
    batch_size: int | None = 64,
    seed: int = 0,
    history: list[float] | None = None,
    targets: Callable[[Regressor, np.ndarray], np.ndarray] | None = None,
) -> Regressor:
    """Train a copy of ``model``; returns the trained copy.

    ``batch_size=None`` gives deterministic full-batch descent.  ``targets``,
    when given, recomputes ``y`` from the current model for each minibatch
    (index array in, raw targets out); the targets are treated as constants
    in the gradient.  Per-epoch full-data loss is appended to ``history``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n = len(x)
    if n == 0:
        raise ValueError("empty sample set")
    if weight is not None and np.any(np.asarray(weight) < 0):
        raise ValueError("sample weights must be nonnegative")
    y = np.asarray(y, dtype=float).reshape(n, -1)
    w = np.ones(n) if weight is None else np.asarray(weight, dtype=float)
    mk = None if mask is None else np.asarray(mask, dtype=float)
    opt = (optimizer or Optimizer()).init(model.n_params)
    out = model.copy()
    rng = np.random.default_rng(seed)
    n_batches = 1 if batch_size is None else max(1, -(-n // batch_size))
    total_steps = max(1, epochs * n_batches)
    cfg = opt.config
    for _ in range(epochs):
        for idx in _batches(n, batch_size, rng):
            frac = opt.step / total_steps
            lr = cfg.lr * (1.0 - (1.0 - cfg.anneal_to) * frac)
            yb = y[idx] if targets is None else np.asarray(targets(out, idx), dtype=float).reshape(len(idx), -1)
            _, g = out.loss_and_grad(x[idx], yb, w[idx], None if mk is None else mk[idx], loss)
            out.params = opt.update(out.params, g, lr)
        if history is not None:
            yy = y if targets is None else np.asarray(targets(out, np.arange(n)), dtype=float).reshape(n, -1)
            history.append(out.loss_and_grad(x, yy, w, mk, loss)[0])
    return out


def fit_squared_loss(
    model: Regressor,
    samples: tuple[np.ndarray, np.ndarray, np.ndarray | None],
    optimizer: Optimizer | None = None,
    epochs: int = 50,
    batch_size: int | None = 64,
    seed: int = 0,
    history: list[float] | None = None,
) -> Regressor:
    """Minimize the weighted squared loss over ``samples = (x, target, weight)``."""
    x, y, w = samples
    return fit(model, x, y, w, optimizer=optimizer, epochs=epochs,
               batch_size=batch_size, seed=seed, history=history)


def head_mask(actions: np.ndarray, n_actions: int) -> np.ndarray:
    """One-hot mask so that each sample supervises only its own action head."""
    return np.eye(n_actions)[np.asarray(actions, dtype=np.int64)]


def gradient_check(
    model: Regressor,
    x: np.ndarray,
    y: np.ndarray,
    eps: float = 1e-6,
    loss: str = "squared",
) -> float:
    """Norm-wise relative error between analytic and central-difference gradients."""
    _, g = model.loss_and_grad(x, y, loss=loss)
    fd = np.zeros_like(g)
    p = model.params.copy()
    for i in range(len(p)):
        p[i] += eps
        up = model.loss_and_grad(x, y, loss=loss, params=p)[0]
        p[i] -= 2 * eps
        dn = model.loss_and_grad(x, y, loss=loss, params=p)[0]
        p[i] += eps
        fd[i] = (up - dn) / (2 * eps)
    denom = max(np.linalg.norm(g) + np.linalg.norm(fd), 1e-300)
    return float(np.linalg.norm(g - fd) / denom)
