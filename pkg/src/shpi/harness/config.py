"""Experiment configuration: a dataclass tree loaded from YAML.

Every section is optional in the file and falls back to its defaults; keys
that do not name a field are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..advantages import ClipBounds
from ..envs.base import BatchEnv
from ..envs.hiv import HivEnv, HivEnvConfig, HivParams
from ..envs.submod import SubmodEnv, SubmodEnvConfig
from ..envs.synthetic import SynthEnvConfig, SyntheticEnv
from ..improvement import ALGORITHMS, ShpiConfig

ENVIRONMENTS = ("synth", "hiv", "submod")
EXPERIMENTS = ("run", "ablate-k", "baseline-sweep", "mse-advantage")
DEFAULT_METRIC = {"synth": "delta", "hiv": "sum", "submod": "mean-per-step"}


class ConfigError(ValueError):
    """Invalid or unknown configuration entries."""


@dataclass(frozen=True)
class EnvironmentSpec:
    name: str = "synth"
    synth: SynthEnvConfig = field(default_factory=SynthEnvConfig)
    hiv: HivEnvConfig = field(default_factory=HivEnvConfig)
    submod: SubmodEnvConfig = field(default_factory=SubmodEnvConfig)

    def __post_init__(self):
        if self.name not in ENVIRONMENTS:
            raise ConfigError(f"environment.name must be one of {ENVIRONMENTS}, got {self.name!r}")

    def build(self) -> BatchEnv:
        if self.name == "synth":
            return SyntheticEnv(self.synth)
        if self.name == "hiv":
            return HivEnv(self.hiv)
        return SubmodEnv(self.submod)


@dataclass(frozen=True)
class LoggingSpec:
    """Behavior policy: SARSA pretraining budget and epsilon-greedy corruption."""

    pretrain_episodes: int = 1000
    epsilon: float = 0.3
    # uniform logging skips pretraining when epsilon is 1
    skip_pretrain_if_uniform: bool = True

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError("logging.epsilon must lie in [0, 1]")
        if self.pretrain_episodes < 1:
            raise ConfigError("logging.pretrain_episodes must be >= 1")


@dataclass(frozen=True)
class BiasSpec:
    mean: float = 0.0
    std: float = 0.0
    period: int = 10

    def __post_init__(self):
        if self.period < 1:
            raise ConfigError("dataset.bias.period must be >= 1")
        if self.std < 0:
            raise ConfigError("dataset.bias.std must be >= 0")


@dataclass(frozen=True)
class DatasetSpec:
    n_offline: int = 2000
    W: int = 28
    delta: int = 20
    bias: BiasSpec | None = None

    def __post_init__(self):
        if self.n_offline < 1 or self.W < 1 or self.delta < 1:
            raise ConfigError("dataset.n_offline, W and delta must be >= 1")


@dataclass(frozen=True)
class ValueSpec:
    """Value model: fitted on the dataset, or loaded from ``path``."""

    epochs: int = 30
    hidden: tuple[int, ...] = (32, 32)
    lr: float = 1e-3
    anneal_to: float = 0.05
    batch_size: int = 1024
    residual: str = "semi"
    # replace logged rewards with V(x) - gamma V(x') before training
    backshift: bool = False
    path: str | None = None


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str = "shpi-offline"
    shpi: ShpiConfig = field(default_factory=ShpiConfig)

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ConfigError(f"algorithm.name must be one of {ALGORITHMS}, got {self.name!r}")


@dataclass(frozen=True)
class EvaluationSpec:
    n_rollouts: int = 200
    n_seeds: int = 5
    metric: str | None = None

    def __post_init__(self):
        if self.n_rollouts < 1 or self.n_seeds < 1:
            raise ConfigError("evaluation.n_rollouts and n_seeds must be >= 1")


@dataclass(frozen=True)
class ExperimentSpec:
    """Which experiment ``run`` performs and its sweep parameters."""

    kind: str = "run"
    k_list: tuple[int, ...] = (1, 2, 5, 10, 28)
    algorithms: tuple[str, ...] = ("shpi-offline", "cb", "session-rl", "cpi-full-k")
    n_probes: int = 200
    n_truth_rollouts: int = 30

    def __post_init__(self):
        if self.kind not in EXPERIMENTS:
            raise ConfigError(f"experiment.kind must be one of {EXPERIMENTS}, got {self.kind!r}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ConfigError(f"unknown algorithms {bad}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    environment: EnvironmentSpec = field(default_factory=EnvironmentSpec)
    logging: LoggingSpec = field(default_factory=LoggingSpec)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    value: ValueSpec = field(default_factory=ValueSpec)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    evaluation: EvaluationSpec = field(default_factory=EvaluationSpec)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)

    @property
    def metric(self) -> str:
        return self.evaluation.metric or DEFAULT_METRIC[self.environment.name]

    def to_dict(self) -> dict:
        return _to_plain(self)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# -- generic conversion ----------------------------------------------------------

# field types that are not nested dataclasses but need coercion from YAML
_TUPLE_FIELDS = {"hidden", "baseline_hidden", "k_list", "algorithms", "omega"}


def _to_plain(obj: Any) -> Any:
    if isinstance(obj, ClipBounds):
        return [obj.q1, obj.q2]
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_plain(v) for v in obj]
    return obj


_NESTED = {
    ExperimentConfig: {
        "environment": EnvironmentSpec, "logging": LoggingSpec, "dataset": DatasetSpec,
        "value": ValueSpec, "algorithm": AlgorithmSpec, "evaluation": EvaluationSpec,
        "experiment": ExperimentSpec,
    },
    EnvironmentSpec: {"synth": SynthEnvConfig, "hiv": HivEnvConfig, "submod": SubmodEnvConfig},
    HivEnvConfig: {"params": HivParams},
    DatasetSpec: {"bias": BiasSpec},
    AlgorithmSpec: {"shpi": ShpiConfig},
}


def _build(cls, data: Any, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {path or 'config'}: {unknown}")
    kwargs = {}
    nested = _NESTED.get(cls, {})
    for key, val in data.items():
        where = f"{path}.{key}" if path else key
        if key in nested:
            kwargs[key] = None if val is None and key == "bias" else _build(nested[key], val, where)
        elif key == "clip":
            if not (isinstance(val, (list, tuple)) and len(val) == 2):
                raise ConfigError(f"{where} must be a pair [q1, q2]")
            kwargs[key] = ClipBounds(float(val[0]), float(val[1]))
        elif key in _TUPLE_FIELDS and val is not None:
            kwargs[key] = tuple(val)
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {path or 'config'}: {exc}") from exc


def config_from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "")


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data)


def default_config_path() -> Path:
    return Path(__file__).with_name("default.yaml")
