"""Transformer-based multi-object density fusion."""

from .loss import mb_nll_loss
from .model import (AttentionRecord, EmbeddingConfig, FusionModel, NetConfig,
                    infer)
from .training import (TrainConfig, TrainRecord, TrainingDiverged,
                       load_checkpoint, save_checkpoint, train)

__all__ = [
    "AttentionRecord", "EmbeddingConfig", "FusionModel", "NetConfig",
    "TrainConfig", "TrainRecord", "TrainingDiverged", "infer",
    "load_checkpoint", "mb_nll_loss", "save_checkpoint", "train",
]
