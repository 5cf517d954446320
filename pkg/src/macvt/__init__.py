"""Masked contrastive video-text alignment at desk scale.

Dual masking (video patches dropped, whole words replaced by [MASK]),
divided space-time attention encoders over the visible tokens only, a
symmetric InfoNCE objective, retrieval metrics, analytic FLOPs accounting
and a deterministic two-stage trainer on synthetic paired data.
"""

from .autodiff import NonFiniteError, Parameter, ShapeError, Tape, Tensor
from .config import ConfigError, RunConfig, TrainConfig
from .data import DataFormatError, SyntheticDatasetSpec, generate_dataset, load_dataset
from .encoders import DualEncoder, EmbeddingBatch, EncoderConfig, desk_config, paper_scale_config
from .metrics import FlopsReport, RetrievalReport, count_params_flops, median_rank, recall_at_k
from .objective import ContrastiveConfig, alignment_margin, infonce_loss, similarity
from .text import TextSequence, Vocabulary, apply_text_mask, sample_text_mask, tokenize
from .train import TrainingDiverged, evaluate, similarity_probe, train
from .video import MaskPlan, PatchSet, VideoClip, image_as_clip, patchify, sample_mask

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContrastiveConfig",
    "DataFormatError",
    "DualEncoder",
    "EmbeddingBatch",
    "EncoderConfig",
    "FlopsReport",
    "MaskPlan",
    "NonFiniteError",
    "Parameter",
    "PatchSet",
    "RetrievalReport",
    "RunConfig",
    "ShapeError",
    "SyntheticDatasetSpec",
    "Tape",
    "Tensor",
    "TextSequence",
    "TrainConfig",
    "TrainingDiverged",
    "VideoClip",
    "Vocabulary",
    "alignment_margin",
    "apply_text_mask",
    "count_params_flops",
    "desk_config",
    "evaluate",
    "generate_dataset",
    "image_as_clip",
    "infonce_loss",
    "load_dataset",
    "median_rank",
    "paper_scale_config",
    "patchify",
    "recall_at_k",
    "sample_mask",
    "sample_text_mask",
    "similarity",
    "similarity_probe",
    "tokenize",
    "train",
]
