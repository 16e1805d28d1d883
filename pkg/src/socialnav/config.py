"""Configuration dataclasses and YAML loading.

Every tunable of the pipeline lives here with its default, so a run is fully
described by one YAML file (see ``configs/default.yaml``).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml


@dataclass(frozen=True)
class RewardConfig:
    r_near: float = 0.1
    r_collision: float = -0.5
    r_goal: float = 10.0
    d_near: int = 3
    d_far: int = 6
    max_steps: int = 100


@dataclass(frozen=True)
class EnvConfig:
    size: int = 9
    view_size: int = 5
    p_pause: float = 0.2
    reward: RewardConfig = field(default_factory=RewardConfig)


@dataclass(frozen=True)
class DataConfig:
    episodes: int = 3000
    mix: float = 0.5
    seed: int = 0


@dataclass(frozen=True)
class WorldModelConfig:
    n_factors: int = 8
    n_values: int = 8
    action_dim: int = 8
    hidden_channels: int = 32
    attention_heads: int = 4
    steps: int = 12000
    batch_size: int = 128
    learning_rate: float = 3e-4
    tau_start: float = 1.0
    tau_end: float = 0.3
    kl_weight: float = 1.0
    holdout_fraction: float = 0.1
    log_every: int = 100
    seed: int = 0


@dataclass(frozen=True)
class PolicyConfig:
    episodes: int = 2000
    hidden: tuple[int, int] = (256, 128)
    gamma: float = 0.95
    learning_rate: float = 5e-4
    replay_capacity: int = 50_000
    batch_size: int = 64
    target_refresh: int = 500
    train_every: int = 1
    warmup: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 1.0 / 3.0
    init_scale: float = 0.1
    plan_max_len: int = 12


@dataclass(frozen=True)
class ExperimentConfig:
    conditions: tuple[str, ...] = ("perfect", "shift", "random")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    smoothing_window: int = 50
    final_window: int = 200
    bootstrap_resamples: int = 10_000
    curve_resamples: int = 1000
    level: float = 0.95
    dataset_path: str | None = None
    checkpoint_path: str | None = None


@dataclass(frozen=True)
class Config:
    env: EnvConfig = field(default_factory=EnvConfig)
    data: DataConfig = field(default_factory=DataConfig)
    world_model: WorldModelConfig = field(default_factory=WorldModelConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


def _build(cls, raw: dict[str, Any] | None):
    raw = dict(raw or {})
    known = {f.name: f for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        f = known[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(raw: dict[str, Any] | None) -> Config:
    return _build(Config, raw)


def load_config(path: str | Path | None) -> Config:
    """Load a YAML config; missing sections and keys fall back to defaults."""
    if path is None:
        return Config()
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is not None and not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def config_to_dict(cfg) -> dict[str, Any]:
    def convert(value):
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        return value

    return convert(dataclasses.asdict(cfg))


def dump_config(cfg: Config, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)
