"""Experiment configuration: a versioned JSON document mapped onto ExperimentConfig."""
from __future__ import annotations

import dataclasses
import json
from importlib import resources
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .agents import DQNConfig
from .env import RewardWeights
from .synth import PRESETS

SCHEMA_VERSION = 1
SCENARIOS = ("ablation", "policy_compare", "scalability", "sensitivity")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "policy_compare"
    n_stations: int = 8
    budget: int = 3
    episodes: int = 500
    seeds: list = field(default_factory=lambda: [0])
    weights: RewardWeights = field(default_factory=RewardWeights)
    feature_kind: str = "physics"
    output_dir: str = "results"

    # scene generator
    preset: Optional[str] = "western_basin_8"
    correlation_length: float = 0.3
    field_scale: float = 0.3
    field_log_sd: float = 1.0
    bloom_threshold: float = 1.5
    noise_sd: float = 2e-4
    n_bands: int = 117

    # belief model
    n_labeled: int = 98
    ensemble_size: int = 10
    member_epochs: int = 200

    # policies
    ucb_beta: float = 1.0
    dqn: DQNConfig = field(default_factory=DQNConfig)
    oracle_cap: int = 10**6
    resamples: int = 10_000

    # representation ablation
    n_train: int = 98
    n_test: int = 92
    shift: float = 1.15
    unlabeled_count: int = 10_000
    ablation_reg: float = 1.0
    labeled_weight: float = 10.0
    student_epochs: int = 30

    # sensitivity scan
    weight_grid: list = field(default_factory=list)
    sensitivity_policy: str = "dqn"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not 1 <= self.budget <= self.n_stations:
            raise ConfigError("budget must be in [1, n_stations]")
        if self.feature_kind not in ("physics", "raw", "combined"):
            raise ConfigError(f"unknown feature kind {self.feature_kind!r}")
        if self.preset is not None:
            if self.preset not in PRESETS:
                raise ConfigError(f"unknown station preset {self.preset!r}")
            if len(PRESETS[self.preset]) != self.n_stations:
                raise ConfigError(f"preset {self.preset!r} does not have {self.n_stations} stations")
        if self.sensitivity_policy not in ("dqn", "myopic"):
            raise ConfigError("sensitivity_policy must be 'dqn' or 'myopic'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = list(self.weights.as_tuple())
        d["weight_grid"] = [list(w.as_tuple()) for w in self.weight_grid]
        d["dqn"]["hidden"] = list(self.dqn.hidden)
        return {"schema_version": SCHEMA_VERSION, **d}


_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)}
_DQN_FIELDS = {f.name for f in dataclasses.fields(DQNConfig)}


def _weights(v) -> RewardWeights:
    if isinstance(v, dict):
        return RewardWeights(**v)
    return RewardWeights(*v)


def config_from_dict(d: dict, **overrides) -> ExperimentConfig:
    d = dict(d)
    version = d.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}")
    d.update(overrides)
    unknown = set(d) - _FIELDS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        if "weights" in d:
            d["weights"] = _weights(d["weights"])
        if "weight_grid" in d:
            d["weight_grid"] = [_weights(w) for w in d["weight_grid"]]
        if "dqn" in d and isinstance(d["dqn"], dict):
            bad = set(d["dqn"]) - _DQN_FIELDS
            if bad:
                raise ConfigError(f"unknown dqn keys: {sorted(bad)}")
            d["dqn"] = DQNConfig(**d["dqn"])
        if "seeds" in d and isinstance(d["seeds"], int):
            d["seeds"] = [d["seeds"]]
        return ExperimentConfig(**d)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def benchmark_config(name: str, **overrides) -> ExperimentConfig:
    """One of the bundled benchmark configurations (``policy_compare``, ``scalability``, ...)."""
    try:
        text = resources.files("lakesense.configs").joinpath(f"{name}.json").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no bundled config named {name!r}") from exc
    return config_from_dict(json.loads(text), **overrides)


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(d, **overrides)
