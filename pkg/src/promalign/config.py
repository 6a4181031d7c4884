"""Run configuration: nested dataclasses loaded from YAML, unknown keys rejected."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .alignment import LossWeights
from .encoders import EncoderConfig
from .errors import ConfigError

STAGES = ("pretrain", "finetune_ner", "finetune_re", "eval", "gen_pseudo_labels")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"optimizer.learning_rate must be > 0, got {self.learning_rate!r}")
        if self.weight_decay < 0:
            raise ConfigError("optimizer.weight_decay must be nonnegative")


@dataclass
class BatchConfig:
    pretrain: int = 8
    finetune: int = 16

    def __post_init__(self):
        if self.pretrain < 1 or self.finetune < 1:
            raise ConfigError("batch sizes must be >= 1")


@dataclass
class PseudoLabelConfig:
    num_entities: int = 50
    entity_template: str = "E1"
    relation_template: str = "RA"
    detector: str = "fixture"  # fixture | random_crop
    encoder: str = "shared"  # shared | independent
    freeze: bool = False
    on_the_fly: bool = True

    def __post_init__(self):
        if self.detector not in ("fixture", "random_crop"):
            raise ConfigError(f"pseudo.detector must be 'fixture' or 'random_crop', got {self.detector!r}")
        if self.encoder not in ("shared", "independent"):
            raise ConfigError(f"pseudo.encoder must be 'shared' or 'independent', got {self.encoder!r}")


@dataclass
class PathsConfig:
    vocab: Optional[str] = None
    image_dir: Optional[str] = None
    pretrain_corpus: Optional[str] = None
    proposals: Optional[str] = None
    pos_lexicon: Optional[str] = None
    relation_tags: Optional[str] = None
    pseudo_label_cache: Optional[str] = None
    pseudo_label_checkpoint: Optional[str] = None
    ner_train: Optional[str] = None
    ner_dev: Optional[str] = None
    ner_test: Optional[str] = None
    re_train: Optional[str] = None
    re_dev: Optional[str] = None
    re_test: Optional[str] = None
    init_checkpoint: Optional[str] = None
    out_dir: str = "runs/default"


@dataclass
class NERConfig:
    entity_types: list = field(default_factory=lambda: ["PER", "LOC", "ORG", "MISC"])


@dataclass
class REConfig:
    relations: Optional[list] = None
    negative_label: Optional[str] = None


@dataclass
class EvalConfig:
    task: str = "ner"
    split: str = "test"
    checkpoint: Optional[str] = None

    def __post_init__(self):
        if self.task not in ("ner", "re"):
            raise ConfigError(f"eval.task must be 'ner' or 're', got {self.task!r}")


@dataclass
class RunConfig:
    stage: str = "pretrain"
    seed: int = 0
    max_steps: int = 500
    checkpoint_every: int = 0
    eval_train: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    pseudo: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    ner: NERConfig = field(default_factory=NERConfig)
    re: REConfig = field(default_factory=REConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return from_dict(RunConfig, merge(self.to_dict(), changes))


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def from_dict(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs: dict[str, Any] = {}
    for name, value in data.items():
        hint = hints[name]
        if dataclasses.is_dataclass(hint):
            kwargs[name] = from_dict(hint, value or {}, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, hint, prefix + name)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _coerce(value, hint, key):
    if value is None:
        return None
    base = typing.get_args(hint)[0] if typing.get_origin(hint) is typing.Union else hint
    if base is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if base in (int, bool, str) and not isinstance(value, base):
        raise ConfigError(f"{key}: expected {base.__name__}, got {value!r}")
    if base is int and isinstance(value, bool):
        raise ConfigError(f"{key}: expected int, got {value!r}")
    return value


def load_config(path) -> RunConfig:
    """Read YAML; relative paths in ``paths`` resolve against the config file's directory."""
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    config = from_dict(RunConfig, data)
    root = path.parent.resolve()
    for f in dataclasses.fields(PathsConfig):
        value = getattr(config.paths, f.name)
        if value is not None and not Path(value).is_absolute():
            setattr(config.paths, f.name, str(root / value))
    return config


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
