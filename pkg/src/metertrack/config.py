"""
Structured configuration shared by the harness and the command line.

A config file is JSON with the sections below; every key is optional and
unknown keys are rejected. Defaults::

    {
      "features": {"frame_rate": 100.0, "profile_half_window": 1.5},
      "tcn": {"n_layers": 8, "base_channels": 16, "kernel_size": 5,
              "dilations": [1, 2, 4, 8, 16, 32, 64, 128],
              "dropout_rate": 0.1, "seed": 0},
      "schedule": {"initial_lr": 0.005, "plateau_patience": 10,
                   "lr_factor": 0.2, "max_epochs": 100,
                   "early_stop_patience": 20},
      "finetune_schedule": {"initial_lr": 0.001, ...same as schedule},
      "bayes": {"n_positions": 1216, "max_tempo_states": 23,
                "tempo_change_prob": 0.02, "tempo_margin": 0.2,
                "bins_per_bar": 64, "n_components": 2},
      "decoder": {"min_bpm": null, "max_bpm": null, "num_tempi": null,
                  "tempo_change_prob": 0.1, "observation_lambda": 16,
                  "beats_per_bar_options": null},
      "protocol": {"excerpt_seconds": 30.0, "max_excerpts": 93,
                   "snippet_seconds": 10.0, "train_fraction": 0.8,
                   "all_val_fraction": 0.25, "split_seed": 0,
                   "bootstrap_resamples": 1000},
      "pretrained": null
    }

``decoder.min_bpm``/``max_bpm`` left at null select the range from the
dataset name; ``beats_per_bar_options`` null uses the manifest meter;
``pretrained`` null uses the checkpoint shipped with the package.

"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from importlib import resources

from .bayesbeat import BayesConfig
from .beats import TempoRange
from .decoders import (DBN_TEMPO_CHANGE_PROB, OBSERVATION_LAMBDA,
                       tempo_range_for)
from .tcn import TcnConfig, TrainSchedule

SEED_ENV = 'MT_SEED'


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    frame_rate: float = 100.0
    profile_half_window: float = 1.5


@dataclass(frozen=True)
class DecoderConfig:
    min_bpm: float | None = None
    max_bpm: float | None = None
    num_tempi: int | None = None
    tempo_change_prob: float = DBN_TEMPO_CHANGE_PROB
    observation_lambda: int = OBSERVATION_LAMBDA
    beats_per_bar_options: tuple | None = None

    def tempo_range(self, dataset_name=''):
        default = tempo_range_for(dataset_name)
        return TempoRange(default.min_bpm if self.min_bpm is None
                          else self.min_bpm,
                          default.max_bpm if self.max_bpm is None
                          else self.max_bpm)

    def options(self, meter):
        if self.beats_per_bar_options is None:
            return (meter,)
        return tuple(self.beats_per_bar_options)


@dataclass(frozen=True)
class ProtocolConfig:
    excerpt_seconds: float = 30.0
    max_excerpts: int = 93
    snippet_seconds: float = 10.0
    train_fraction: float = 0.8
    all_val_fraction: float = 0.25
    split_seed: int = 0
    bootstrap_resamples: int = 1000


def _tcn_default():
    return TcnConfig()


def _ft_default():
    return TrainSchedule.finetune_default()


@dataclass(frozen=True)
class ExperimentConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    tcn: TcnConfig = field(default_factory=_tcn_default)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    finetune_schedule: TrainSchedule = field(default_factory=_ft_default)
    bayes: BayesConfig = field(default_factory=BayesConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    pretrained: str | None = None

    def pretrained_path(self):
        if self.pretrained is not None:
            return self.pretrained
        return str(resources.files('metertrack') / 'data' /
                   'pretrained_tcn.npz')

    def to_dict(self):
        return asdict(self)


# keys that are fixed by other sections and may not be set in a file
_HIDDEN = {'tcn': {'n_bands'}, 'bayes': {'seed', 'frame_rate'}}


def _build(default, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f'{path or "config"}: expected an object')
    known = {f.name: f for f in fields(default)}
    hidden = _HIDDEN.get(path, set())
    unknown = sorted(set(data) - set(known) | (set(data) & hidden))
    if unknown:
        raise ConfigError(f'unknown key {path + "." if path else ""}'
                          f'{unknown[0]}')
    kwargs = {}
    for name, value in data.items():
        current = getattr(default, name)
        sub = f'{path}.{name}' if path else name
        if is_dataclass(current):
            kwargs[name] = _build(current, value, sub)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return replace(default, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'{path or "config"}: {exc}') from exc


def config_from_dict(data):
    return _build(ExperimentConfig(), data, '')


def load_config(path=None):
    """Defaults overridden by the JSON file at ``path`` (if given)."""
    if path is None:
        return ExperimentConfig()
    try:
        with open(path) as f:
            data = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f'{path}: line {exc.lineno}: {exc.msg}') from exc
    return config_from_dict(data)


def default_seed(explicit=None):
    """``explicit`` if given, else ``$MT_SEED``, else 0."""
    if explicit is not None:
        return int(explicit)
    value = os.environ.get(SEED_ENV)
    if value is None or value == '':
        return 0
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(f'{SEED_ENV} must be an integer, got {value!r}'
                          ) from exc
