"""Symmetric InfoNCE over a batch of paired unit-norm embeddings.

Both softmax directions (video->text over rows, text->video over columns)
contribute a cross-entropy term against the diagonal; the result is the
standard non-negative symmetric contrastive loss, evaluated through
log-sum-exp so extreme temperatures cannot overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    add,
    diagonal,
    exp,
    logsumexp_lastdim,
    matmul,
    mean,
    mul,
    scale,
    transpose,
)
from .encoders import EmbeddingBatch


@dataclass(frozen=True)
class ContrastiveConfig:
    """Temperature handling; tau is stored as log-tau so it stays positive."""

    tau_init: float = 0.07
    learnable: bool = True
    tau_min: float = 0.01
    tau_max: float = 1.0

    def __post_init__(self):
        if self.tau_init <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau_init}")
        if not self.tau_min <= self.tau_init <= self.tau_max:
            raise ValueError(
                f"tau_init {self.tau_init} outside clamp range "
                f"[{self.tau_min}, {self.tau_max}]"
            )


def similarity(batch: EmbeddingBatch) -> Tensor:
    """B x B cosine matrix; rows are videos, columns are texts."""
    return matmul(batch.video, transpose(batch.text, (1, 0)))


def infonce_from_similarity(sim: Tensor, log_tau) -> Tensor:
    """Loss given a similarity matrix and a (possibly learnable) log-tau."""
    if isinstance(log_tau, Tensor):
        z = mul(sim, exp(scale(log_tau, -1.0)))
    else:
        tau = float(log_tau)
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        z = scale(sim, 1.0 / tau)
    row_losses = add(logsumexp_lastdim(z), scale(diagonal(z), -1.0))
    zt = transpose(z, (1, 0))
    col_losses = add(logsumexp_lastdim(zt), scale(diagonal(zt), -1.0))
    return add(mean(row_losses), mean(col_losses))


def infonce_loss(batch: EmbeddingBatch, log_tau) -> Tensor:
    """Symmetric InfoNCE; ``log_tau`` is a Parameter or a plain tau value.

    With perfectly aligned pairs and orthogonal negatives the value is
    2*log(e^{1/tau} + B - 1) - 2/tau; for B=1 with video == text it is
    exactly zero.
    """
    if batch.batch_size < 1:
        raise ValueError("contrastive loss needs at least one pair")
    return infonce_from_similarity(similarity(batch), log_tau)


def alignment_margin(video: np.ndarray, text: np.ndarray) -> float:
    """mean(diagonal similarity) - mean(off-diagonal similarity).

    A training-progress probe, not a loss; positive once pairs are closer
    to each other than to strangers.
    """
    video = np.asarray(video, dtype=np.float64)
    text = np.asarray(text, dtype=np.float64)
    b = video.shape[0]
    if b < 2:
        raise ValueError("margin needs a batch of at least two pairs")
    sim = video @ text.T
    diag = np.trace(sim) / b
    off = (sim.sum() - np.trace(sim)) / (b * b - b)
    return float(diag - off)


def aligned_orthogonal_loss(batch_size: int, tau: float) -> float:
    """Closed form for the diagonal-aligned, orthogonal-negatives case."""
    return 2.0 * math.log(math.exp(1.0 / tau) + batch_size - 1.0) - 2.0 / tau
