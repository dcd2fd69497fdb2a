"""Faithfulness-enhanced summarization: QA-guided graph encoder, QA-attention
decoder and a max-margin penalty against language-model overconfidence,
trained on a synthetic fact corpus."""

from .model import ModelConfig
from .trainer import TrainConfig, Trainer

__all__ = ["ModelConfig", "TrainConfig", "Trainer"]
__version__ = "0.1.0"
