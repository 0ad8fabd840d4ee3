"""Experiment configuration: schema, YAML loading, validation, echo.

The on-disk format is YAML (nested key/value text) with a mandatory
schema_version and seed. Unknown keys are rejected and type errors name the
offending field path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
import typing

import yaml

from . import artifacts
from .corpus import AugmentPolicy, DEFAULT_NOISE_SIGMA
from .detector import DetectorConfig, LossWeights
from .errors import ConfigurationError
from .imprint import ExpansionPolicy
from .toygen import ReconstructionSettings

SCHEMA_VERSION = 1


@dataclass
class CorpusSection:
    resolution: int = 32
    n_train_real: int = 2000
    n_eval_real: int = 400
    n_fit_real: int = 500
    noise_sigma: tuple[float, float] = DEFAULT_NOISE_SIGMA
    source: str = "synthetic"  # or a dataset directory path


@dataclass
class GeneratorSection:
    family_size: int = 6
    epochs: int = 14
    denoiser_epochs: int = 40
    mse_ceiling: float = 0.01
    train_index: int = 0          # generator whose outputs are the known fakes
    holdout_index: int = 5        # evaluated but excluded from training+simulator
    simulator_indices: tuple[int, ...] = (1, 2, 3, 4)
    reconstruction: ReconstructionSettings = field(default_factory=ReconstructionSettings)


@dataclass
class SimulatorSection:
    enabled: bool = True
    expansion: ExpansionPolicy = field(default_factory=ExpansionPolicy)


@dataclass
class AugmentSection:
    enabled: bool = True
    jpeg_quality: tuple[int, int] = (30, 100)
    blur_sigma: tuple[float, float] = (0.1, 3.0)
    jpeg_probability: float = 0.1
    blur_probability: float = 0.1
    augment_fakes: bool = True

    def to_policy(self):
        return AugmentPolicy(self.jpeg_quality, self.blur_sigma,
                             self.jpeg_probability, self.blur_probability)


@dataclass
class DetectorSection:
    d_noise: int = 128
    d_freq: int = 32
    d_sem: int = 128
    enable_noise: bool = True
    enable_freq: bool = True
    enable_sem: bool = True
    temperature: float = 0.1
    loss_weights: LossWeights = field(default_factory=LossWeights)


@dataclass
class TrainSection:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 10
    pair_batch_size: int = 16
    pair_ratio: float = 1.0  # aux pair batches consumed per detection batch
    augment: AugmentSection = field(default_factory=AugmentSection)


@dataclass
class EvalSection:
    perturb_reals: bool = True


@dataclass
class ExperimentConfig:
    seed: int
    schema_version: int = SCHEMA_VERSION
    output_dir: str = "runs/default"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    generators: GeneratorSection = field(default_factory=GeneratorSection)
    simulator: SimulatorSection = field(default_factory=SimulatorSection)
    detector: DetectorSection = field(default_factory=DetectorSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"schema_version {self.schema_version} unsupported "
                f"(expected {SCHEMA_VERSION})")
        g = self.generators
        indices = (g.train_index, g.holdout_index, *g.simulator_indices)
        if any(i < 0 or i >= g.family_size for i in indices):
            raise ConfigurationError(
                "generators: train/holdout/simulator indices must lie inside "
                f"the family of size {g.family_size}")
        if g.holdout_index in g.simulator_indices:
            raise ConfigurationError(
                "generators.holdout_index must not appear in simulator_indices")
        if self.corpus.resolution not in (16, 32, 64):
            raise ConfigurationError("corpus.resolution must be 16, 32, or 64")
        self.simulator.expansion.validate()
        self.detector.loss_weights.validate()
        if self.train.learning_rate <= 0 or self.train.batch_size <= 0 \
                or self.train.epochs <= 0:
            raise ConfigurationError(
                "train: learning_rate, batch_size, and epochs must be positive")
        return self

    @property
    def latent_shape(self):
        r = self.corpus.resolution // 4
        return (4, r, r)

    def detector_config(self):
        d = self.detector
        return DetectorConfig(
            resolution=self.corpus.resolution, d_noise=d.d_noise,
            d_freq=d.d_freq, d_sem=d.d_sem, enable_noise=d.enable_noise,
            enable_freq=d.enable_freq, enable_sem=d.enable_sem,
            temperature=d.temperature,
            loss_weights=LossWeights(**dataclasses.asdict(d.loss_weights)),
            latent_shape=self.latent_shape)


# -- generic dict -> dataclass builder -------------------------------------------


def _coerce(hint, value, path):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, path)
    if origin in (typing.Union,):  # Optional[...]
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(args[0], value, path)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{path}: expected bool, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{path}: expected int, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{path}: expected number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{path}: expected string, got {value!r}")
        return value
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{path}: expected list, got {value!r}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]")
                         for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigurationError(
                f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]")
                     for i, (a, v) in enumerate(zip(args, value)))
    if origin is list:
        (arg,) = typing.get_args(hint)
        return [_coerce(arg, v, f"{path}[{i}]") for i, v in enumerate(value)]
    raise ConfigurationError(f"{path}: unsupported config type {hint}")


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigurationError(f"{path}.{unknown[0]}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _coerce(hints[f.name], data[f.name],
                                     f"{path}.{f.name}")
        elif (f.default is dataclasses.MISSING
              and f.default_factory is dataclasses.MISSING):
            raise ConfigurationError(f"{path}.{f.name}: required key missing")
    return cls(**kwargs)


def from_dict(data):
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} does not exist")
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return from_dict(data)


def to_dict(cfg):
    """Echo with defaults filled; loading the echo reproduces the config."""
    def clean(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: clean(getattr(value, f.name))
                    for f in dataclasses.fields(value)}
        if isinstance(value, tuple):
            return [clean(v) for v in value]
        if isinstance(value, list):
            return [clean(v) for v in value]
        return value
    return clean(cfg)


def save_config(cfg, path):
    with open(path, "w") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=False)


def hash_config(cfg):
    return artifacts.config_hash(to_dict(cfg))


def apply_overrides(cfg, overrides):
    """Rebuild a config with dotted-path overrides, revalidating."""
    data = to_dict(cfg)
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node:
                raise ConfigurationError(f"override {dotted}: unknown section {part}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"override {dotted}: unknown key")
        node[parts[-1]] = value
    return from_dict(data)
