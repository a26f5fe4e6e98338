"""Experiment configuration: YAML files validated by pydantic, unknown keys rejected."""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetConfig(_Section):
    kind: Literal["blobs", "digits", "file"] = "blobs"
    path: Optional[str] = None
    classes: int = Field(10, ge=2)
    dim: int = Field(64, ge=1)
    samples: int = Field(3000, ge=2)
    test_samples: int = Field(1000, ge=1)
    spread: float = Field(0.03, gt=0)
    center_scale: float = Field(0.07, gt=0)
    offset: float = 0.5
    seed: int = 0


class VictimConfig(_Section):
    arch: str = "mlp-small"
    epochs: int = Field(20, ge=1)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    seed: int = 0
    checkpoint: Optional[str] = None


class OracleConfig(_Section):
    rounding_decimals: Optional[int] = Field(None, ge=0)
    topk: Optional[int] = Field(None, ge=1)
    detection: bool = False
    detection_threshold: float = Field(0.9, gt=0, lt=1)
    budget: Optional[int] = Field(None, ge=0)
    price_per_1k: float = Field(0.25, ge=0)
    endpoint: Optional[str] = None


class AttackConfig(_Section):
    mode: Literal["opt-syn", "dnn-syn", "random", "auxiliary"] = "opt-syn"
    substitute_arch: str = "mlp-small"
    stealing_epochs: int = Field(50, ge=1)
    train_epochs: int = Field(10, ge=0)
    opt_iterations: int = Field(30, ge=0)
    samples_per_epoch: int = Field(256, ge=1)
    synth_lr: float = Field(0.01, gt=0)
    kd_lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(64, ge=1)
    lambda_ms: float = Field(1.0, ge=0)
    latent_dim: int = Field(16, ge=1)
    generator_hidden: int = Field(128, ge=1)
    generator_lr: float = Field(1e-3, gt=0)
    replay_all: bool = False
    augment: bool = True
    topk_fillup: bool = True
    baseline_epochs: Optional[int] = Field(None, ge=1)
    baseline_queries: Optional[int] = Field(None, ge=1)
    aux_shift: float = math.pi / 2
    aux_seed: int = 7
    seed: int = 0
    resume: Optional[str] = None


class EvaluationConfig(_Section):
    pgd_epsilon: float = Field(0.1, ge=0)
    pgd_step: float = Field(0.01, ge=0)
    pgd_iterations: int = Field(20, ge=0)
    pgd_samples: int = Field(500, ge=1)
    clip_min: float = -1.0
    clip_max: float = 1.0
    detection_threshold: float = Field(0.9, gt=0, lt=1)


class OutputConfig(_Section):
    directory: str = "runs/default"


class ExperimentConfig(_Section):
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    victim: VictimConfig = Field(default_factory=VictimConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    attack: AttackConfig = Field(default_factory=AttackConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)

    def resolved_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def preset_names() -> list[str]:
    files = resources.files("eslab").joinpath("presets").iterdir()
    return sorted(p.name[:-5] for p in files if p.name.endswith(".yaml"))


def _preset_text(name: str) -> str:
    path = resources.files("eslab").joinpath("presets").joinpath(f"{name}.yaml")
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    return path.read_text()


def parse_config(data: dict | None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data or {})
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(source: str | Path | None) -> ExperimentConfig:
    """Load a config from a YAML path or a preset name; ``None`` gives the defaults."""
    if source is None:
        return parse_config({})
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    elif path.suffix in (".yaml", ".yml"):
        raise ConfigError(f"config file {str(path)!r} not found")
    else:
        text = _preset_text(str(source))
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {source}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return parse_config(data)


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, object]) -> ExperimentConfig:
    """Set ``section.key`` values (``None`` values are skipped) and revalidate."""
    data = cfg.model_dump()
    for dotted, value in overrides.items():
        if value is None:
            continue
        section, key = dotted.split(".", 1)
        if section not in data or key not in data[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        data[section][key] = value
    return parse_config(data)


def write_resolved(cfg: ExperimentConfig, directory: str | Path) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "resolved-config.yaml"
    path.write_text(cfg.resolved_yaml())
    return path
