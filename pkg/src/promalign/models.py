"""Task models wrapping the shared encoder, and checkpoint persistence."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch
import torch.nn as nn

from .alignment import PretrainHeads
from .encoders import EncoderConfig, MultimodalEncoder, init_weights
from .errors import ConfigError
from .mner import LabelSchema, NERTagger
from .mre import RelationClassifier

CHECKPOINT_SCHEMA_VERSION = 1

# Fields that determine parameter shapes; seed and temperature do not.
SHAPE_FIELDS = (
    "vocab_size", "max_text_len", "num_patches", "patch_feature_dim", "hidden_dim",
    "visual_hidden_dim", "patch_proj_dim", "joint_dim", "num_layers", "num_heads", "mlp_ratio",
)


def _head_generator(config: EncoderConfig) -> torch.Generator:
    return torch.Generator().manual_seed(config.seed + 7919)


class PretrainModel(nn.Module):
    task = "pretrain"

    def __init__(self, config: EncoderConfig, num_entities: int, num_relations: int):
        super().__init__()
        self.encoder = MultimodalEncoder(config)
        self.heads = PretrainHeads(config, num_entities, num_relations)
        init_weights(self.heads, _head_generator(config))

    def trainable_parameters(self):
        return self.encoder.non_marker_parameters() + list(self.heads.parameters())


class NERModel(nn.Module):
    task = "ner"

    def __init__(self, config: EncoderConfig, schema: LabelSchema):
        super().__init__()
        self.encoder = MultimodalEncoder(config)
        self.tagger = NERTagger(config, schema)
        init_weights(self.tagger, _head_generator(config))

    def trainable_parameters(self):
        return list(self.parameters())


class REModel(nn.Module):
    task = "re"

    def __init__(self, config: EncoderConfig, num_relations: int):
        super().__init__()
        self.encoder = MultimodalEncoder(config)
        self.classifier = RelationClassifier(config, num_relations)
        init_weights(self.classifier, _head_generator(config))

    def trainable_parameters(self):
        return list(self.parameters())


def check_compatible(saved: dict, config: EncoderConfig) -> None:
    diffs = [f for f in SHAPE_FIELDS if saved.get(f) != getattr(config, f)]
    if diffs:
        detail = ", ".join(f"{f}: checkpoint {saved.get(f)!r} vs config {getattr(config, f)!r}" for f in diffs)
        raise ConfigError(f"checkpoint encoder does not match config ({detail})")


def save_checkpoint(path, model: nn.Module, run_config, step: int, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "task": model.task,
        "state_dict": model.state_dict(),
        "config": run_config.to_dict(),
        "encoder_config": dataclasses.asdict(model.encoder.config),
        "step": step,
        "rng_state": torch.get_rng_state(),
        "meta": meta or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint schema {payload.get('schema_version')!r}")
    return payload


def load_encoder_weights(encoder: MultimodalEncoder, payload: dict) -> None:
    """Copy the ``encoder.*`` tensors of a checkpoint into ``encoder``."""
    check_compatible(payload["encoder_config"], encoder.config)
    state = {k[len("encoder."):]: v for k, v in payload["state_dict"].items() if k.startswith("encoder.")}
    encoder.load_state_dict(state)


def model_from_checkpoint(payload: dict) -> nn.Module:
    """Rebuild the full task model stored in a checkpoint."""
    config = EncoderConfig(**payload["encoder_config"])
    meta = payload["meta"]
    task = payload["task"]
    if task == "pretrain":
        model = PretrainModel(config, meta["num_entities"], meta["num_relations"])
    elif task == "ner":
        model = NERModel(config, LabelSchema(meta["entity_types"]))
    elif task == "re":
        model = REModel(config, len(meta["relations"]))
    else:
        raise ConfigError(f"unknown checkpoint task {task!r}")
    model.load_state_dict(payload["state_dict"])
    return model
