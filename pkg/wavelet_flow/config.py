"""
config.py

Run configuration: model architecture per level, training and sampling settings and paths.

A configuration is a YAML (or JSON) mapping with the sections `model`, `train`, `sample` and `paths`. Per-level knobs
in `model` are lists of length n + 1 (index 0 is the base flow); a scalar is broadcast to every level.

Classes:
    LevelConfig
    SampleConfig
    PathsConfig
    RunConfig

Functions:
    resolve_seed(cli_seed, config) -> int
"""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

from wavelet_flow.mcmc import NutsConfig
from wavelet_flow.train import TrainConfig

logger = logging.getLogger(__name__)

SEED_ENV = 'WAVELETFLOW_SEED'
PER_LEVEL_KEYS = ('steps', 'conv_channels', 'residual_blocks', 'coupling', 'patch_size', 'batch_size')


@dataclass
class LevelConfig:
    steps: int = 4
    conv_channels: int = 32
    residual_blocks: int = 1
    coupling: str = 'affine'
    patch_size: Optional[int] = None
    batch_size: Optional[int] = None


@dataclass
class SampleConfig:
    temperature: float = 1.0
    sampler: str = 'direct'
    nuts: NutsConfig = field(default_factory=NutsConfig)


@dataclass
class PathsConfig:
    train_dir: Optional[str] = None
    val_dir: Optional[str] = None
    checkpoint_dir: str = 'checkpoints'
    log_dir: str = 'logs'


def _dataclass_from(cls, section: Dict[str, Any], name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ValueError(f"Unknown key(s) {sorted(unknown)} in config section '{name}'")
    try:
        return cls(**section)
    except (TypeError, ValueError) as e:
        raise ValueError(f"Invalid config section '{name}': {e}") from e


@dataclass
class RunConfig:
    n: int
    channels: int
    levels: List[LevelConfig]
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.n < 0:
            raise ValueError(f"model.n must be non-negative, got {self.n}")
        if self.channels < 1:
            raise ValueError(f"model.channels must be positive, got {self.channels}")
        if len(self.levels) != self.n + 1:
            raise ValueError(f"model needs {self.n + 1} per-level entries, got {len(self.levels)}")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        """
        Builds and validates a configuration from a loaded YAML/JSON mapping.

        :param data: dict with sections model, train, sample and paths.
        :return: RunConfig.
        """
        if not isinstance(data, dict):
            raise ValueError("Configuration must be a mapping")
        unknown = set(data) - {'model', 'train', 'sample', 'paths'}
        if unknown:
            raise ValueError(f"Unknown config section(s) {sorted(unknown)}")
        model = dict(data.get('model') or {})
        for key in ('n', 'channels'):
            if key not in model:
                raise ValueError(f"Config key 'model.{key}' is required")
        n, channels = int(model.pop('n')), int(model.pop('channels'))

        per_level: Dict[str, list] = {}
        for key in PER_LEVEL_KEYS:
            if key not in model:
                continue
            value = model.pop(key)
            if isinstance(value, (list, tuple)):
                if len(value) != n + 1:
                    raise ValueError(f"Config key 'model.{key}' needs {n + 1} entries (one per level), "
                                     f"got {len(value)}")
                per_level[key] = list(value)
            else:
                per_level[key] = [value] * (n + 1)
        if model:
            raise ValueError(f"Unknown key(s) {sorted(model)} in config section 'model'")
        levels = [LevelConfig(**{k: v[j] for k, v in per_level.items()}) for j in range(n + 1)]

        sample = dict(data.get('sample') or {})
        nuts = _dataclass_from(NutsConfig, dict(sample.pop('nuts', None) or {}), 'sample.nuts')
        sample_config = _dataclass_from(SampleConfig, {**sample, 'nuts': nuts}, 'sample')
        if sample_config.sampler not in ('direct', 'mcmc'):
            raise ValueError(f"Config key 'sample.sampler' must be 'direct' or 'mcmc', got {sample_config.sampler}")

        return cls(
            n=n,
            channels=channels,
            levels=levels,
            train=_dataclass_from(TrainConfig, dict(data.get('train') or {}), 'train'),
            sample=sample_config,
            paths=_dataclass_from(PathsConfig, dict(data.get('paths') or {}), 'paths'),
        )

    def to_dict(self) -> Dict[str, Any]:
        model = {'n': self.n, 'channels': self.channels}
        for key in PER_LEVEL_KEYS:
            model[key] = [getattr(lc, key) for lc in self.levels]
        return {
            'model': model,
            'train': dataclasses.asdict(self.train),
            'sample': dataclasses.asdict(self.sample),
            'paths': dataclasses.asdict(self.paths),
        }

    def level_batch_size(self, level: int) -> int:
        return self.levels[level].batch_size or self.train.batch_size


def resolve_seed(cli_seed: Optional[int], config: Optional[RunConfig] = None) -> int:
    """
    Picks the run seed: the --seed flag, else the WAVELETFLOW_SEED environment variable, else train.seed.

    :param cli_seed: Value of --seed or None.
    :param config: Loaded configuration.
    :return: int seed.
    """
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ''):
        try:
            return int(env)
        except ValueError:
            raise ValueError(f"{SEED_ENV} must be an integer, got '{env}'") from None
    return config.train.seed if config is not None else 0
