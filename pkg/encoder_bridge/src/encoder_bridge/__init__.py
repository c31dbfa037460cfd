"""Encoder companion for the retrieval pipeline: batch embedding export
from pretrained text encoders, plus full-encoder contrastive fine-tuning
that shares the pipeline's loss, batch assembly, and file formats."""

from .encoders import HfEncoder, ModelLoadError, ToyEncoder, load_encoder
from .export import ExportResult, export_embeddings, read_texts
from .finetune import (
    BridgeConfig,
    BridgeTraceRow,
    FinetuneDivergedError,
    FinetuneResult,
    batch_nce_loss,
    finetune_encoder,
    load_bridge_config,
)

__version__ = "0.1.0"
