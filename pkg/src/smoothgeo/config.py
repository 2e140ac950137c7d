"""TOML run configuration mapped onto TrainConfig and ExperimentSpec."""

from __future__ import annotations

import dataclasses
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .experiments import ExperimentSpec
from .training import TrainConfig

# keys that belong to neither dataclass but steer the CLI
RUN_KEYS = ("dataset", "data_root", "checkpoint", "index", "method", "region")


class ConfigError(ValueError):
    pass


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _coerce(key: str, value):
    # TOML arrays arrive as lists; the frozen dataclasses hold tuples
    return tuple(value) if isinstance(value, list) and key != "region" else value


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig
    experiment: dict
    run: dict

    def experiment_spec(self, **overrides) -> ExperimentSpec:
        return ExperimentSpec(**{**self.experiment, **overrides})


def parse_config(doc: dict) -> RunConfig:
    """Split a parsed TOML document into trainer, experiment and run settings.

    Top-level keys are routed by field name; ``[train]`` and ``[experiment]``
    tables set one side explicitly. Unknown keys are an error.
    """
    train_f, exp_f = _fields(TrainConfig), _fields(ExperimentSpec)
    train_kw, exp_kw, run = {}, {}, {}
    for key, value in doc.items():
        if key == "train" and isinstance(value, dict):
            for k, v in value.items():
                if k not in train_f:
                    raise ConfigError(f"unknown [train] key {k!r}")
                train_kw[k] = _coerce(k, v)
        elif key == "experiment" and isinstance(value, dict):
            for k, v in value.items():
                if k not in exp_f:
                    raise ConfigError(f"unknown [experiment] key {k!r}")
                exp_kw[k] = _coerce(k, v)
        elif key in RUN_KEYS:
            run[key] = value
            if key in exp_f:
                exp_kw[key] = value
        elif key in train_f or key in exp_f:
            if key in train_f:
                train_kw[key] = _coerce(key, value)
            if key in exp_f:
                exp_kw[key] = _coerce(key, value)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        train = TrainConfig(**train_kw)
        ExperimentSpec(**exp_kw)
    except (TypeError, ValueError) as err:
        raise ConfigError(str(err)) from err
    return RunConfig(train, exp_kw, run)


def load_config(path=None) -> RunConfig:
    if path is None:
        return parse_config({})
    with Path(path).open("rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as err:
            raise ConfigError(f"{path}: {err}") from err
    return parse_config(doc)
