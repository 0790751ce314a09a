"""Experiment configuration: YAML file + ``--set`` overrides + flags, validated by pydantic.

Precedence, lowest first: model defaults, YAML file, ``--set key=value``
overrides, dedicated CLI flags. Unknown keys are rejected.
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from src.errors import ConfigError
from src.federation import STRATEGY_NAMES, FederationConfig, StrategyConfig
from src.model import ArchConfig
from src.partition import ShiftConfig

logger = logging.getLogger(__name__)

# sweep axis -> dotted config key, and the grids the ablation tables use
SWEEP_AXES = {
    "M": "concepts.num_concepts",
    "d": "concepts.embed_dim",
    "iota": "concepts.iota",
    "kappa": "concepts.kappa",
    "gamma": "concepts.gamma",
}
DEFAULT_GRIDS: dict[str, list[float]] = {
    "M": [3, 6, 10],
    "d": [3, 6, 10],
    "iota": [0.001, 0.005, 0.01, 0.1],
    "kappa": [0.01, 0.05, 0.1, 0.5, 0.95],
    "gamma": [0.01, 0.1, 0.5, 0.95],
}


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(Section):
    kind: Literal["synthetic", "idx"] = "synthetic"
    num_classes: int = Field(10, ge=2)
    clusters_per_class: int = Field(1, ge=1)
    dim: int = Field(20, ge=1)
    separation: float = Field(4.0, gt=0)
    num_samples: int = Field(4000, ge=2)
    images_path: str | None = None
    labels_path: str | None = None

    @model_validator(mode="after")
    def _idx_needs_paths(self) -> DatasetSection:
        if self.kind == "idx" and not (self.images_path and self.labels_path):
            raise ValueError("idx datasets need images_path and labels_path")
        return self


class ShiftSection(Section):
    mode: Literal["target_shift", "feature_shift"] = "target_shift"
    num_groups: int = Field(5, ge=1)
    alpha: float = Field(0.5, gt=0)
    clients_per_group: int = Field(8, ge=1)
    test_fraction: float = Field(0.2, gt=0, lt=1)
    train_groups: int = Field(3, ge=1)
    num_domains: int = Field(5, ge=2)
    clients_per_domain: int = Field(6, ge=2)
    heldout_domains: int = Field(0, ge=0)
    mixed_clients: int = Field(5, ge=0)
    max_samples: int | None = Field(None, ge=1)
    domain_offset: float = Field(2.0, ge=0)
    domain_noise: float = Field(0.3, ge=0)

    @model_validator(mode="after")
    def _groups_fit(self) -> ShiftSection:
        if self.train_groups > self.num_groups:
            raise ValueError(f"train_groups ({self.train_groups}) exceeds num_groups ({self.num_groups})")
        if self.heldout_domains >= self.num_domains:
            raise ValueError("heldout_domains must leave at least one training domain")
        return self

    def to_shift_config(self) -> ShiftConfig:
        return ShiftConfig(**self.model_dump())


class ModelSection(Section):
    hidden_dims: list[int] = Field(default_factory=lambda: [64])
    activation: Literal["relu", "tanh"] = "relu"
    dtype: Literal["float32", "float64"] = "float32"
    projection_gain: float = Field(1.0, gt=0)

    @field_validator("hidden_dims")
    @classmethod
    def _positive(cls, value: list[int]) -> list[int]:
        if any(h <= 0 for h in value):
            raise ValueError("hidden layer widths must be positive")
        return value


class ConceptSection(Section):
    num_concepts: int = Field(10, ge=1)
    embed_dim: int = Field(10, ge=1)
    iota: float = Field(0.1, gt=0)
    kappa: float = Field(0.05, ge=0, lt=1)
    gamma: float = Field(0.1, ge=0)
    init: Literal["normal", "kmeans++", "file"] = "normal"
    init_path: str | None = None
    freeze: bool = False

    @model_validator(mode="after")
    def _file_needs_path(self) -> ConceptSection:
        if self.init == "file" and not self.init_path:
            raise ValueError("init 'file' needs init_path")
        return self


class FederationSection(Section):
    rounds: int = Field(50, ge=1)
    local_epochs: int = Field(2, ge=0)
    batch_size: int = Field(10, ge=1)
    lr: float = Field(0.005, gt=0)
    lr_decay: float = Field(0.8, gt=0, le=1)
    decay_every: int = Field(10, ge=1)
    cohort_size: int = Field(10, ge=1)
    drop_prob: float = Field(0.0, ge=0, lt=1)
    estimate_test_preferences: bool = False
    eval_splits: list[Literal["local_train", "local_test"]] = Field(default_factory=lambda: ["local_test"])


class StrategySection(Section):
    name: list[str] = Field(default_factory=lambda: ["fedvc_em"])
    mu: float = Field(0.01, ge=0)
    finetune_epochs: int = Field(1, ge=0)

    @field_validator("name", mode="before")
    @classmethod
    def _as_list(cls, value: Any) -> Any:
        return [value] if isinstance(value, str) else value

    @field_validator("name")
    @classmethod
    def _known(cls, value: list[str]) -> list[str]:
        unknown = [v for v in value if v not in STRATEGY_NAMES]
        if unknown:
            raise ValueError(f"unknown strategies {unknown}; expected any of {list(STRATEGY_NAMES)}")
        if not value:
            raise ValueError("at least one strategy is required")
        return list(dict.fromkeys(value))


class OutputSection(Section):
    out: str = "runs/default"
    run_id: str = ""
    checkpoint_every: int = Field(10, ge=0)
    projections: bool = True


class ExperimentConfig(Section):
    seed: int = 0
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    shift: ShiftSection = Field(default_factory=ShiftSection)
    model: ModelSection = Field(default_factory=ModelSection)
    concepts: ConceptSection = Field(default_factory=ConceptSection)
    federation: FederationSection = Field(default_factory=FederationSection)
    strategy: StrategySection = Field(default_factory=StrategySection)
    output: OutputSection = Field(default_factory=OutputSection)

    def arch(self, input_dim: int) -> ArchConfig:
        return ArchConfig(
            input_dim=input_dim,
            hidden_dims=tuple(self.model.hidden_dims),
            num_classes=self.dataset.num_classes,
            embed_dim=self.concepts.embed_dim,
            activation=self.model.activation,
            dtype=self.model.dtype,
            projection_gain=self.model.projection_gain,
        )

    def federation_config(self) -> FederationConfig:
        fed = self.federation
        return FederationConfig(
            rounds=fed.rounds,
            local_epochs=fed.local_epochs,
            batch_size=fed.batch_size,
            lr=fed.lr,
            lr_decay=fed.lr_decay,
            decay_every=fed.decay_every,
            cohort_size=fed.cohort_size,
            iota=self.concepts.iota,
            kappa=self.concepts.kappa,
            gamma=self.concepts.gamma,
            freeze_concepts=self.concepts.freeze,
            drop_prob=fed.drop_prob,
            estimate_test_preferences=fed.estimate_test_preferences,
            eval_splits=tuple(fed.eval_splits),
        )

    def strategy_configs(self) -> list[StrategyConfig]:
        return [
            StrategyConfig(name=name, mu=self.strategy.mu, finetune_epochs=self.strategy.finetune_epochs)
            for name in self.strategy.name
        ]


def _set_dotted(data: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = data
    for i, part in enumerate(parts[:-1]):
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(".".join(parts[: i + 1]), "is not a section")
        node = child
    node[parts[-1]] = value


def parse_override(raw: str) -> tuple[str, Any]:
    key, sep, value = raw.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(raw, "overrides must look like key=value")
    try:
        return key, yaml.safe_load(value)
    except yaml.YAMLError as exc:
        raise ConfigError(key, f"cannot parse value {value!r}: {exc}") from None


def load_yaml(path: Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError("", f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError("", f"{path}: invalid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("", f"{path}: top level must be a mapping")
    return data


def parse_config(
    path: Path | None = None,
    overrides: Sequence[str] = (),
    *,
    seed: int | None = None,
    out: str | None = None,
    strategies: Sequence[str] | None = None,
) -> ExperimentConfig:
    data = load_yaml(path) if path is not None else {}
    for raw in overrides:
        _set_dotted(data, *parse_override(raw))
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        _set_dotted(data, "output.out", out)
    if strategies:
        _set_dotted(data, "strategy.name", list(strategies))
    return validate_config(data)


def validate_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error["loc"])
        raise ConfigError(key, error["msg"]) from None


def dump_config(cfg: ExperimentConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False), encoding="utf-8")
    return path
