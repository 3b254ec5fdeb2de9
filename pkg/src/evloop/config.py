"""Run configuration shared by the command-line tools.

A config file is JSON with optional sections; every key must be known.
Missing keys take the library defaults, and command-line flags override
both.  :meth:`RunConfig.to_dict` gives the fully resolved configuration,
which commands echo into their output directories.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, fields
from pathlib import Path

from .attribution import AttributionConfig
from .augmentation import AugmentConfig
from .classifier import PRESETS, TrainConfig
from .errors import EvloopError
from .imaging import PreprocessSpec
from .synthetic import GeneratorConfig


class ConfigError(EvloopError, ValueError):
    exit_code = 1


def _defaults():
    att = asdict(AttributionConfig())
    att.pop("ig_baseline")
    aug = {f.name: getattr(AugmentConfig(), f.name) for f in fields(AugmentConfig) if f.name != "attribution"}
    train = asdict(TrainConfig())
    train.pop("seed")
    return {
        "seed": 0,
        "preset": "vgg_mini",
        "counts": {"0": 250, "1": 250, "2": 250, "3": 250},
        "generator": GeneratorConfig().to_dict(),
        "preprocess": asdict(PreprocessSpec()),
        "train": train,
        "attribution": att,
        "augment": aug,
        "evaluation": {"radius_pct": 1.4, "fp_rate": 10.0, "per_image": False, "augment": True},
    }


DEFAULTS = _defaults()
# sections whose inner keys are free-form (grade labels)
_OPEN_SECTIONS = ("counts",)


class RunConfig:
    def __init__(self, data=None):
        self.data = copy.deepcopy(DEFAULTS)
        if data:
            self.merge(data)

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        return cls(data)

    def merge(self, data):
        for key, value in data.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}; valid: {', '.join(DEFAULTS)}")
            default = DEFAULTS[key]
            if isinstance(default, dict):
                if not isinstance(value, dict):
                    raise ConfigError(f"config section {key!r} must be an object")
                if key in _OPEN_SECTIONS:
                    self.data[key] = dict(value)
                    continue
                for sub, v in value.items():
                    if sub not in default:
                        raise ConfigError(f"unknown key {sub!r} in section {key!r}; "
                                          f"valid: {', '.join(default)}")
                    self.data[key][sub] = v
            else:
                self.data[key] = value
        self.validate()

    def set(self, section, key, value):
        """Flag override; ``None`` means the flag was not given."""
        if value is None:
            return
        if key is None:
            self.merge({section: value})
        else:
            self.merge({section: {key: value}})

    def validate(self):
        if self.data["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {self.data['preset']!r}; valid: {', '.join(PRESETS)}")
        try:
            self.generator_config()
            self.preprocess_spec()
            self.train_config()
            self.augment_config()
            self.counts()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    # typed views -----------------------------------------------------------

    @property
    def seed(self):
        return int(self.data["seed"])

    def counts(self):
        out = {}
        for grade, n in self.data["counts"].items():
            g, n = int(grade), int(n)
            if g not in (0, 1, 2, 3) or n < 0:
                raise ValueError(f"bad count {grade}: {n}")
            out[g] = n
        return out

    def generator_config(self):
        return GeneratorConfig.from_dict(self.data["generator"])

    def preprocess_spec(self):
        return PreprocessSpec(**self.data["preprocess"])

    def train_config(self):
        return TrainConfig(seed=self.seed, **self.data["train"])

    def attribution_config(self):
        return AttributionConfig(**self.data["attribution"])

    def augment_config(self):
        return AugmentConfig(attribution=self.attribution_config(), **self.data["augment"])

    @property
    def evaluation(self):
        return self.data["evaluation"]

    def to_dict(self):
        return copy.deepcopy(self.data)

    def write(self, directory, name="run_config.json"):
        path = Path(directory) / name
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path
