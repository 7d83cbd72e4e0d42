"""Experiment configuration: nested dataclasses serialised as JSON.

Unknown keys are rejected and tuples come back as tuples, so
``loads(dumps(cfg)) == cfg`` holds for every valid config.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ParameterError
from .models import DenoiserConfig, DoseNetConfig
from .physics import NoiseModelParams
from .projector import Geometry
from .training import TrainConfig


@dataclass(frozen=True)
class CohortConfig:
    n_cases: int = 200
    size_range: tuple[float, float] = (0.5, 0.95)
    grid_size: int = 128
    seed: int = 0
    ellipse_count: int = 6
    intensity_range: tuple[float, float] = (0.1, 0.6)
    body_intensity: float = 0.2
    edge_sigma: float = 1.0
    manifest: str | None = None  # load images from here instead of generating


@dataclass(frozen=True)
class PolicyConfig:
    methods: tuple[str, ...] = ("fixed", "tcm", "end2end")
    # None: tune on the validation split to the End2end mean PSNR
    fixed_n0: float | None = None
    tcm_reference: float | None = None
    tcm_mode: str = "max"
    baseline_epochs: int = 10  # denoiser training per baseline policy; 0 keeps plain FBP
    eval_seeds: int = 5
    eval_split: str = "test"
    oracle: bool = False
    oracle_cases: int = 20
    oracle_seeds: int = 5
    oracle_tolerance: float = 0.05
    search_lower: float = 1e2
    search_upper: float = 1e9


@dataclass
class ExperimentConfig:
    out: str = "runs/default"
    cohort: CohortConfig = field(default_factory=CohortConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)

    def validate(self):
        try:
            self.train.validate()
        except ParameterError as exc:
            raise ConfigError(str(exc)) from exc
        unknown = set(self.policy.methods) - {"fixed", "tcm", "end2end"}
        if unknown:
            raise ConfigError(f"unknown methods {sorted(unknown)}")
        if self.policy.eval_split not in ("train", "validation", "test"):
            raise ConfigError(f"eval_split must be train/validation/test, got {self.policy.eval_split!r}")
        if self.policy.tcm_mode not in ("max", "mean"):
            raise ConfigError(f"tcm_mode must be 'max' or 'mean', got {self.policy.tcm_mode!r}")
        if self.cohort.grid_size != self.train.geometry.image_size:
            raise ConfigError(f"cohort grid_size {self.cohort.grid_size} != geometry image_size "
                              f"{self.train.geometry.image_size}")
        return self


def to_dict(cfg):
    return dataclasses.asdict(cfg)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - names
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{where}.{name}")
    try:
        return cls(**kwargs)
    except (TypeError, ParameterError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _coerce(hint, value, where):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(value) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(data) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=False) + "\n"


def loads(text) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(data)


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path


__all__ = ["CohortConfig", "PolicyConfig", "ExperimentConfig", "DenoiserConfig", "DoseNetConfig", "Geometry",
           "NoiseModelParams", "TrainConfig", "dumps", "loads", "load", "save", "to_dict", "from_dict"]
