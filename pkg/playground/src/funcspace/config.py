"""
This module contains the configuration of the command line tools.

Defaults come from the dataclasses of the individual modules. A YAML file merges on top of them and
command line flags merge last. The schema is strict: unknown keys and ill-typed values raise
:class:`ConfigError`.

Example file:
::

    seed: 7
    gen:
      activation: leaky_relu
      n_max: 5
    train:
      loss: "p:-2"
      epochs: 2

"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .embsearch import SearchConfig
from .funcae import TrainConfig
from .genlab import GenConfig, InfeasibleConfigError
from .models import ArchitectureConfig

logger = logging.getLogger("funcspace.config")


class ConfigError(ValueError):
    pass


@dataclass
class CliConfig:
    seed: int = 0
    threads: Optional[int] = None
    gen: GenConfig = field(default_factory=GenConfig)
    architecture: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    search: SearchConfig = field(default_factory=SearchConfig)

    def validate(self):
        try:
            self.gen.validate()
            self.architecture.validate()
            self.train.validate()
            self.search.validate(self.architecture.l_max)
        except (InfeasibleConfigError, ValueError) as error:
            raise ConfigError(str(error)) from error
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"Thread count must be positive, got {self.threads}.")
        return self


def drop_unset(overrides: Mapping[str, Any]) -> dict:
    """Nested copy of `overrides` without the entries that are None (flags that were not given)."""
    result = {}
    for key, value in overrides.items():
        if isinstance(value, Mapping):
            value = drop_unset(value)
            if value:
                result[key] = value
        elif value is not None:
            result[key] = value
    return result


def seed_overrides(seed: Optional[int]) -> dict:
    """Overrides that route one seed to every consumer of randomness."""
    if seed is None:
        return {}
    return {
        "seed": seed,
        "gen": {"seed": seed},
        "architecture": {"init_seed": seed},
        "train": {"seed": seed},
        "search": {"seed": seed},
    }


def load_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> CliConfig:
    """
    Effective configuration: dataclass defaults, then the file at `path`, then `overrides`.

    :raises ConfigError: on unknown keys, type mismatches, invalid values or a missing file.
    """
    try:
        merged = OmegaConf.structured(CliConfig)
        OmegaConf.set_struct(merged, True)
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"Config file {path} does not exist.")
            merged = OmegaConf.merge(merged, OmegaConf.load(path))
        if overrides:
            merged = OmegaConf.merge(merged, OmegaConf.create(drop_unset(overrides)))
        config = OmegaConf.to_object(merged)
    except OmegaConfBaseException as error:
        raise ConfigError(str(error).splitlines()[0]) from error
    return config.validate()


def explicit_value(key: str, path=None, overrides: Optional[Mapping[str, Any]] = None):
    """
    Value of the dotted `key` as set by the file at `path` or by `overrides` (which win),
    or None when neither sets it, i.e. when the effective value is the default.
    """
    value = None
    try:
        if path is not None and Path(path).is_file():
            value = OmegaConf.select(OmegaConf.load(path), key)
        if overrides:
            flagged = OmegaConf.select(OmegaConf.create(drop_unset(overrides)), key)
            value = value if flagged is None else flagged
    except OmegaConfBaseException as error:
        raise ConfigError(str(error).splitlines()[0]) from error
    return value


def to_container(config: CliConfig) -> dict:
    """Plain nested dict of `config`, as echoed into run manifests."""
    return OmegaConf.to_container(OmegaConf.structured(config))


def dump_config(config: CliConfig) -> str:
    return OmegaConf.to_yaml(OmegaConf.structured(config))
