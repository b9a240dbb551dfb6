"""Turn-factorized multimodal graph encoder with contrastive pretraining and QA fine-tuning."""

from .config import TrainConfig, load_config
from .data import SynthConfig, generate, load_records, save_records
from .records import NodeKind, QAItem, Turn, VideoRecord

__all__ = ["TrainConfig", "load_config", "SynthConfig", "generate", "load_records",
           "save_records", "NodeKind", "QAItem", "Turn", "VideoRecord"]
