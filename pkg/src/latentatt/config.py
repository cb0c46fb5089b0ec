"""Run configuration: one YAML file with ``task``, ``model``, ``train`` and
``decode`` sections, plus dotted command-line overrides.

A recipe file instead holds ``base`` (a partial config) and ``runs`` (a
mapping from run name to a further partial config); pick one with ``run=``.

Overrides look like ``model.variant=local`` or ``train.max_epochs=5``; the
value is parsed as YAML so ``null``, ``true`` and ``[2, 1]`` work. Keys not
present in the defaults are rejected everywhere.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field

import yaml

from .data import TaskConfig
from .errors import ConfigError
from .nnet import ModelConfig
from .search import DecodeConfig
from .training import TrainConfig

CONFIG_ENV = "LATATT_CONFIG"


@dataclass
class RunConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)

    def __post_init__(self):
        if (self.model.vocab_size, self.model.feature_dim) != (self.task.vocab_size, self.task.feature_dim):
            raise ConfigError("model.vocab_size/feature_dim must match task.vocab_size/feature_dim")

    def to_dict(self):
        return {
            "task": asdict(self.task),
            "model": self.model.to_dict(),
            "train": asdict(self.train),
            "decode": asdict(self.decode),
        }

    @classmethod
    def from_dict(cls, d):
        full = _merge(default_dict(), d or {}, "")
        try:
            return cls(
                TaskConfig(**full["task"]),
                ModelConfig.from_dict(full["model"]),
                TrainConfig(**full["train"]),
                DecodeConfig(**full["decode"]),
            )
        except TypeError as e:  # wrong value shapes surface here
            raise ConfigError(str(e)) from None

    def dumps(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)


def default_dict():
    return RunConfig().to_dict()


def _merge(base, update, prefix):
    if not isinstance(update, dict):
        raise ConfigError(f"expected a mapping at {prefix or 'top level'}")
    out = copy.deepcopy(base)
    for key, value in update.items():
        name = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {name!r}")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value, name + ".")
        else:
            out[key] = value
    return out


def parse_override(text):
    """``'a.b=value'`` -> ``{'a': {'b': value}}``."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse value in override {text!r}: {e}") from None
    out = value
    for part in reversed(key.split(".")):
        out = {part: out}
    return out


def _read_yaml(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return yaml.safe_load(fh) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from None


def is_recipe(d):
    return isinstance(d, dict) and "runs" in d


def recipe_runs(path):
    d = _read_yaml(path)
    if not is_recipe(d):
        raise ConfigError(f"{path} is not a recipe (no 'runs' section)")
    return list(d["runs"])


def load(path=None, overrides=(), run=None):
    """Defaults, then the file at ``path`` (or ``$LATATT_CONFIG``), then overrides."""
    path = path or os.environ.get(CONFIG_ENV) or None
    d = _read_yaml(path) if path else {}
    if is_recipe(d):
        extra = set(d) - {"description", "base", "runs"}
        if extra:
            raise ConfigError(f"unknown recipe keys: {sorted(extra)}")
        runs = d["runs"] or {}
        if run is None or run not in runs:
            raise ConfigError(f"recipe {path} needs --run, one of: {', '.join(runs)}")
        d = _merge(_merge(default_dict(), d.get("base") or {}, ""), runs[run] or {}, "")
    elif run is not None:
        raise ConfigError("--run given but the config is not a recipe")
    d = _merge(default_dict(), d, "")
    for ov in overrides:
        d = _merge(d, parse_override(ov), "")
    return RunConfig.from_dict(d)
