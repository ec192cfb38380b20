"""Experiment configuration: strict YAML parsing into nested dataclasses.

Unknown keys are rejected (a silent hyperparameter typo is worse than an
error) and the resolved config round-trips: parse -> resolve -> serialize ->
parse is a fixed point.
"""

from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import DATASET_SOURCES, DatasetSpec
from .errors import ConfigError
from .masks import MaskConfig, StrokeParams
from .sampling import SamplerConfig
from .training import TrainConfig

PIPELINES = ("unconditional", "conditional")
TRIGGER_KINDS = ("universal", "distributional", "generator")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def build(self):
        from .schedule import build_linear_schedule

        return build_linear_schedule(self.T, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class ModelConfig:
    base_width: int = 32
    time_dim: int = 64


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "universal"
    bound: float = 0.2
    targets: tuple[str, ...] = ("checker",)
    generator_width: int = 32

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ConfigError(f"trigger.kind must be one of {TRIGGER_KINDS}, got {self.kind!r}")
        if not self.bound > 0:
            raise ConfigError(f"trigger.bound must be positive, got {self.bound}")


@dataclass(frozen=True)
class MaskSettings:
    kinds: tuple[str, ...] = ("rect", "freeform")
    min_area_frac: float = 0.1
    max_area_frac: float = 0.5
    num_strokes: tuple[int, int] = (4, 8)
    width_frac: tuple[float, float] = (0.10, 0.25)
    max_vertices: int = 8
    max_angle: float = math.pi / 4
    length_frac: tuple[float, float] = (0.15, 0.40)

    def build(self) -> MaskConfig:
        return MaskConfig(
            kinds=self.kinds,
            min_area_frac=self.min_area_frac,
            max_area_frac=self.max_area_frac,
            strokes=StrokeParams(
                num_strokes=self.num_strokes,
                width_frac=self.width_frac,
                max_vertices=self.max_vertices,
                max_angle=self.max_angle,
                length_frac=self.length_frac,
            ),
        )


@dataclass(frozen=True)
class SamplerSettings:
    kind: str = "ddim"
    n_steps: int = 10
    eta: float = 0.0
    guidance_scale: float = 1.0
    clip_latents: bool = False

    def build(self, differentiable: bool = False) -> SamplerConfig:
        return SamplerConfig(
            kind=self.kind,
            n_steps=self.n_steps,
            eta=self.eta,
            guidance_scale=self.guidance_scale,
            clip_latents=self.clip_latents,
            differentiable=differentiable,
        )


@dataclass(frozen=True)
class EvalSettings:
    n_samples: int = 2048
    mse_samples: int = 256
    feature_dim: int = 32
    extractor_seed: int = 17
    batch_size: int = 64


@dataclass(frozen=True)
class ExperimentConfig:
    pipeline: str = "unconditional"
    seed: int = 0
    output_dir: str = "runs/experiment"
    checkpoint_every: int = 0  # steps between mid-run checkpoints; 0 = final only
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    masks: MaskSettings = field(default_factory=MaskSettings)
    sampler: SamplerSettings = field(default_factory=SamplerSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)


_CAPTIONED_SOURCES = ("builtin-synthetic-shapes", "captioned-image-folder")


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    if cfg.pipeline not in PIPELINES:
        raise ConfigError(f"pipeline must be one of {PIPELINES}, got {cfg.pipeline!r}")
    if cfg.pipeline == "conditional":
        if cfg.dataset.source not in _CAPTIONED_SOURCES:
            raise ConfigError(
                "dataset.source: conditional pipeline requires a caption table "
                f"(one of {_CAPTIONED_SOURCES}), got {cfg.dataset.source!r}"
            )
        if cfg.trigger.kind != "generator":
            raise ConfigError(
                f"trigger.kind: conditional pipeline requires 'generator', got {cfg.trigger.kind!r}"
            )
    else:
        if cfg.trigger.kind == "generator":
            raise ConfigError("trigger.kind: 'generator' is only valid for the conditional pipeline")
    if cfg.train.poison_rate > 0 and not cfg.trigger.targets:
        raise ConfigError("trigger.targets: poisoning requires at least one target")
    if cfg.train.inner_sample_steps > cfg.schedule.T:
        raise ConfigError("train.inner_sample_steps exceeds schedule.T")
    if cfg.sampler.n_steps > cfg.schedule.T:
        raise ConfigError("sampler.n_steps exceeds schedule.T")
    if cfg.eval.feature_dim >= cfg.eval.n_samples:
        raise ConfigError("eval.n_samples must exceed eval.feature_dim")
    return cfg


def _coerce(value, hint, path: str):
    origin = typing.get_origin(hint)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
        return _from_dict(hint, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        args = typing.get_args(hint)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _from_dict(cls, data: dict, path: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(where + k for k in unknown))}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            sub = f"{path}.{f.name}" if path else f.name
            kwargs[f.name] = _coerce(data[f.name], hints[f.name], sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    return validate_config(_from_dict(ExperimentConfig, data))


def _plain(value):
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved plain dict (every default explicit)."""
    return _plain(cfg)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark else ""
        raise ConfigError(f"{path}: YAML parse error{where}: {exc}") from exc
    return config_from_dict(data or {})


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
