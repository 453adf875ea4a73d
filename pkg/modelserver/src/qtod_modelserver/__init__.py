"""Reference model server for the dialogue-engine wire protocol."""

from .model import (
    ModelSpec,
    RELEVANCE_PROMPT,
    build_model,
    embed_texts,
    generate_text,
    load_checkpoint,
    pretrain_checkpoint,
    relevance_of,
    save_checkpoint,
)
from .server import create_app
from .training import (
    DataError,
    TrainingConfig,
    TrainResult,
    load_pairs,
    relevance_accuracy,
    train_joint,
    train_relevance,
)
from .vocab import MATCHED, MISMATCHED, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "DataError",
    "MATCHED",
    "MISMATCHED",
    "ModelSpec",
    "RELEVANCE_PROMPT",
    "TrainResult",
    "TrainingConfig",
    "Vocabulary",
    "build_model",
    "create_app",
    "embed_texts",
    "generate_text",
    "load_checkpoint",
    "load_pairs",
    "pretrain_checkpoint",
    "relevance_accuracy",
    "relevance_of",
    "save_checkpoint",
    "train_joint",
    "train_relevance",
]
