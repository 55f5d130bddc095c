"""Pipeline configuration: one JSON document drives every CLI command.

Unknown keys are rejected at every nesting level so typos in sweep scripts
fail loudly. All randomness flows from the seeds recorded here; nothing
reads the clock or OS entropy.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .bank import KEY_TEMPLATE_CHOICES
from .encoder import SyntheticWorldSpec
from .errors import ConfigError
from .numerics import AdamWHyper
from .prompt_learning import TrainConfig
from .qkpm import QkpmConfig


@dataclass(frozen=True)
class SplitConfig:
    shots: int = 1
    base_fraction: float = 0.5
    test_per_class: int = 100
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.shots < 1:
            raise ValueError(f"shots must be >= 1, got {self.shots}")
        if self.test_per_class < 1:
            raise ValueError(f"test_per_class must be >= 1, got {self.test_per_class}")
        if not 0 < self.base_fraction < 1:
            raise ValueError(f"base_fraction must be in (0, 1), got {self.base_fraction}")
        if not self.seeds:
            raise ValueError("seeds list must be non-empty")


@dataclass(frozen=True)
class PipelineConfig:
    """World source plus every scalar knob of the pipeline."""

    world: SyntheticWorldSpec | str  # spec, or a path to an offline feature file
    train: TrainConfig = field(default_factory=TrainConfig)
    qkpm: QkpmConfig = field(default_factory=QkpmConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    key_template: str = "shared"
    csv_path: str | None = None
    bank_path: str | None = None

    def __post_init__(self):
        if self.key_template not in KEY_TEMPLATE_CHOICES:
            raise ValueError(f"key_template must be one of {KEY_TEMPLATE_CHOICES}")

    @property
    def is_synthetic(self) -> bool:
        return isinstance(self.world, SyntheticWorldSpec)


def default_pipeline_config() -> PipelineConfig:
    """The seeded default task used across tests and examples."""
    return PipelineConfig(world=SyntheticWorldSpec(seed=7, class_count=32, feature_dim=32))


def _build_section(cls, data: dict, section: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(
            f"unknown keys in '{section}': {sorted(unknown)}; allowed: {sorted(allowed)}"
        )
    try:
        return cls(**data)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


def parse_pipeline_config(document: dict) -> PipelineConfig:
    if not isinstance(document, dict):
        raise ConfigError("configuration root must be a JSON object")
    allowed = {"world", "train", "qkpm", "split", "bank", "output"}
    unknown = set(document) - allowed
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}; allowed: {sorted(allowed)}")

    world_data = dict(document.get("world", {"kind": "synthetic"}))
    kind = world_data.pop("kind", "synthetic")
    if kind == "synthetic":
        world = _build_section(SyntheticWorldSpec, world_data, "world")
    elif kind == "offline":
        path = world_data.pop("path", None)
        if world_data:
            raise ConfigError(f"unknown keys in offline 'world': {sorted(world_data)}")
        if not isinstance(path, str) or not path:
            raise ConfigError("offline world needs a 'path' string")
        world = path
    else:
        raise ConfigError(f"world kind must be 'synthetic' or 'offline', got {kind!r}")

    train_data = dict(document.get("train", {}))
    if "adamw" in train_data:
        train_data["adamw"] = _build_section(AdamWHyper, dict(train_data["adamw"]), "train.adamw")
    train = _build_section(TrainConfig, train_data, "train")
    qkpm = _build_section(QkpmConfig, dict(document.get("qkpm", {})), "qkpm")
    split = _build_section(SplitConfig, dict(document.get("split", {})), "split")

    bank_data = dict(document.get("bank", {}))
    key_template = bank_data.pop("key_template", "shared")
    if bank_data:
        raise ConfigError(f"unknown keys in 'bank': {sorted(bank_data)}")

    output = dict(document.get("output", {}))
    csv_path = output.pop("csv", None)
    bank_path = output.pop("bank", None)
    if output:
        raise ConfigError(f"unknown keys in 'output': {sorted(output)}")

    try:
        return PipelineConfig(
            world=world,
            train=train,
            qkpm=qkpm,
            split=split,
            key_template=key_template,
            csv_path=csv_path,
            bank_path=bank_path,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_pipeline_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            document = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return parse_pipeline_config(document)
