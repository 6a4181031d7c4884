"""Prompt-guided multimodal alignment pre-training with NER and RE fine-tuning heads."""

from .alignment import LossWeights, pretrain_losses, total_loss
from .config import RunConfig, load_config, save_config
from .encoders import EncoderConfig, MultimodalEncoder
from .errors import ConfigError, ExternalError, InputError, PromalignError
from .mner import CRF, LabelSchema, NERTagger
from .mre import RelationClassifier, inject_entity_markers

__all__ = [
    "CRF", "ConfigError", "EncoderConfig", "ExternalError", "InputError", "LabelSchema", "LossWeights",
    "MultimodalEncoder", "NERTagger", "PromalignError", "RelationClassifier", "RunConfig",
    "inject_entity_markers", "load_config", "pretrain_losses", "save_config", "total_loss",
]
