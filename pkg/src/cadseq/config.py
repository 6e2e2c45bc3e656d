"""Run configuration loaded from JSON."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from cadseq.geometry import DEFAULT_ARC_SEGMENTS, DEFAULT_N_POINTS, DEFAULT_RESOLUTION
from cadseq.latent_gan import GanConfig
from cadseq.model import ModelConfig
from cadseq.rre import RreConfig
from cadseq.training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GeometryConfig:
    resolution: int = DEFAULT_RESOLUTION
    arc_segments: int = DEFAULT_ARC_SEGMENTS
    n_points: int = DEFAULT_N_POINTS


@dataclass
class PathsConfig:
    dataset: str = ""
    checkpoints: str = "checkpoints"
    reports: str = "reports"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rre: RreConfig = field(default_factory=RreConfig)
    gan: GanConfig = field(default_factory=GanConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def propagate_seed(self) -> None:
        self.train.seed = self.seed
        self.rre.seed = self.seed
        self.gan.seed = self.seed

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "rre": RreConfig, "gan": GanConfig,
             "geometry": GeometryConfig, "paths": PathsConfig}


def _build(cls, data: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}]: {e}") from e


def config_from_dict(data: dict, check_paths: bool = True) -> RunConfig:
    unknown = set(data) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown sections: {sorted(unknown)}")
    kwargs = {name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    cfg = RunConfig(**kwargs, seed=int(data.get("seed", 0)))
    if "seed" in data:
        cfg.propagate_seed()
    if cfg.gan.latent_dim != cfg.model.d_model:
        cfg.gan.latent_dim = cfg.model.d_model
    if check_paths and cfg.paths.dataset and not Path(cfg.paths.dataset).exists():
        raise ConfigError(f"dataset path {cfg.paths.dataset} does not exist")
    return cfg


def load_config(path=None, check_paths: bool = True) -> RunConfig:
    if path is None:
        return config_from_dict({}, check_paths)
    with open(path) as f:
        return config_from_dict(json.load(f), check_paths)
