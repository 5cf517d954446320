"""Retrieval metrics and the analytic parameter/FLOPs counter.

Counting conventions: one multiply-accumulate = 2 FLOPs; softmax,
layernorm and gelu cost 5 FLOPs per element. Attention cost covers the
QKV/output projections, QK^T and the attention-weighted V. The divided
space-time model prices temporal attention over groups of size
(visible fraction * frames) and spatial attention over each frame's
visible set, which is where the S*T -> S+T reduction shows up; masking
shrinks every token-proportional term because masked patches are dropped,
while parameter counts are independent of masking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import EncoderConfig
from .video import masked_count

MAC_FLOPS = 2.0          # FLOPs per multiply-accumulate
NONLINEAR_FLOPS = 5.0    # FLOPs per element for softmax/layernorm/gelu


class MetricError(ValueError):
    pass


@dataclass
class RetrievalReport:
    """R@K percentages plus median rank for one query direction."""

    direction: str
    r1: float
    r5: float
    r10: float
    median_rank: float
    queries: int

    def to_dict(self) -> dict:
        return {
            "direction": self.direction,
            "r1": self.r1,
            "r5": self.r5,
            "r10": self.r10,
            "median_rank": self.median_rank,
            "queries": self.queries,
        }


def _query_ranks(sim: np.ndarray, direction: str) -> np.ndarray:
    """1-based rank of the true (diagonal) match for every query.

    Candidates are ordered by descending similarity with ties broken in
    favour of the lower index, so ranking is fully deterministic.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise MetricError(f"similarity matrix must be square, got {sim.shape}")
    if direction == "text_to_video":
        scores = sim.T  # one row of scores per text query
    elif direction == "video_to_text":
        scores = sim
    else:
        raise MetricError(f"direction must be text_to_video or video_to_text, got {direction!r}")
    n = scores.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    for q in range(n):
        row = scores[q]
        true = row[q]
        better = np.count_nonzero(row > true)
        tied_before = np.count_nonzero(row[:q] == true)
        ranks[q] = 1 + better + tied_before
    return ranks


def recall_at_k(sim: np.ndarray, k: int, direction: str) -> float:
    """Percentage of queries whose true match ranks within the top k."""
    n = np.asarray(sim).shape[0]
    if k > n:
        raise MetricError(f"k={k} exceeds gallery size {n}")
    ranks = _query_ranks(sim, direction)
    return float(100.0 * np.count_nonzero(ranks <= k) / len(ranks))


def median_rank(sim: np.ndarray, direction: str) -> int:
    """Median of the true-match ranks; even counts take the lower centre."""
    ranks = np.sort(_query_ranks(sim, direction))
    return int(ranks[(len(ranks) - 1) // 2])


def retrieval_report(sim: np.ndarray, direction: str) -> RetrievalReport:
    n = np.asarray(sim).shape[0]
    return RetrievalReport(
        direction=direction,
        r1=recall_at_k(sim, 1, direction),
        r5=recall_at_k(sim, min(5, n), direction),
        r10=recall_at_k(sim, min(10, n), direction),
        median_rank=median_rank(sim, direction),
        queries=n,
    )


# ---------------------------------------------------------------------------
# analytic parameter / FLOPs accounting


@dataclass
class SubnetReport:
    params: int
    flops: float

    def to_dict(self) -> dict:
        return {"params": self.params, "flops": self.flops}


@dataclass
class FlopsReport:
    video: SubnetReport
    text: SubnetReport
    heads: SubnetReport
    frames: int
    visible_per_frame: int
    text_len: int

    @property
    def total_params(self) -> int:
        return self.video.params + self.text.params + self.heads.params

    @property
    def total_flops(self) -> float:
        return self.video.flops + self.text.flops + self.heads.flops

    def to_dict(self) -> dict:
        return {
            "video": self.video.to_dict(),
            "text": self.text.to_dict(),
            "heads": self.heads.to_dict(),
            "total_params": self.total_params,
            "total_flops": self.total_flops,
            "tokens": {
                "frames": self.frames,
                "visible_per_frame": self.visible_per_frame,
                "text_len": self.text_len,
            },
        }


def video_param_count(cfg: EncoderConfig) -> int:
    d = cfg.video_width
    h = cfg.video_mlp_width
    patch = (cfg.patch_size * cfg.patch_size * 3) * d + d
    tables = (cfg.patches_per_frame + cfg.max_frames + 1) * d  # E_s, E_t, [CLS]
    attn = 4 * d * d + 4 * d
    mlp = 2 * d * h + h + d
    block = 2 * attn + mlp + 3 * (2 * d)
    return patch + tables + cfg.video_depth * block + 2 * d


def text_param_count(cfg: EncoderConfig) -> int:
    d = cfg.text_width
    h = cfg.text_mlp_width
    tables = (cfg.vocab_size + cfg.text_positions) * d
    attn = 4 * d * d + 4 * d
    mlp = 2 * d * h + h + d
    block = attn + mlp + 2 * (2 * d)
    return tables + cfg.text_depth * block + 2 * d


def head_param_count(cfg: EncoderConfig) -> int:
    return (cfg.video_width + 1 + cfg.text_width + 1) * cfg.proj_dim


def _attention_flops(tokens: float, width: int, heads: int, score_pairs: float) -> float:
    """Projections for `tokens` rows plus `score_pairs` query-key pairs."""
    macs = 4.0 * tokens * width * width + 2.0 * score_pairs * width
    softmax_elems = heads * score_pairs
    return MAC_FLOPS * macs + NONLINEAR_FLOPS * softmax_elems


def _mlp_flops(tokens: float, width: int, hidden: int) -> float:
    macs = 2.0 * tokens * width * hidden
    return MAC_FLOPS * macs + NONLINEAR_FLOPS * tokens * hidden


def _layernorm_flops(tokens: float, width: int) -> float:
    return NONLINEAR_FLOPS * tokens * width


def video_flops(cfg: EncoderConfig, frames: int, visible_per_frame: int) -> float:
    """Forward cost of the divided space-time encoder on one clip."""
    d = cfg.video_width
    n = cfg.patches_per_frame
    v = visible_per_frame
    patch_tokens = frames * v
    t = patch_tokens + 1  # plus the global [CLS]
    fraction = v / n

    # temporal: n groups of (fraction * frames) tokens; spatial: one group
    # of v tokens per frame; [CLS] couples to every token in both.
    cls_pairs = 2.0 * t - 1.0
    temporal_pairs = n * (fraction * frames) ** 2 + cls_pairs
    spatial_pairs = frames * float(v) ** 2 + cls_pairs

    per_block = (
        _attention_flops(t, d, cfg.video_heads, temporal_pairs)
        + _attention_flops(t, d, cfg.video_heads, spatial_pairs)
        + _mlp_flops(t, d, cfg.video_mlp_width)
        + 3.0 * _layernorm_flops(t, d)
    )
    embed = MAC_FLOPS * patch_tokens * (cfg.patch_size * cfg.patch_size * 3) * d
    final_norm = _layernorm_flops(t, d)
    return embed + cfg.video_depth * per_block + final_norm


def text_flops(cfg: EncoderConfig, text_len: int) -> float:
    d = cfg.text_width
    l = text_len
    per_block = (
        _attention_flops(l, d, cfg.text_heads, float(l) ** 2)
        + _mlp_flops(l, d, cfg.text_mlp_width)
        + 2.0 * _layernorm_flops(l, d)
    )
    return cfg.text_depth * per_block + _layernorm_flops(l, d)


def head_flops(cfg: EncoderConfig) -> float:
    return MAC_FLOPS * (cfg.video_width + cfg.text_width) * cfg.proj_dim


def count_params_flops(cfg: EncoderConfig, frames: int, visible_per_frame: int,
                       text_len: int) -> FlopsReport:
    """Analytic per-clip forward FLOPs and parameter counts."""
    if visible_per_frame < 0 or visible_per_frame > cfg.patches_per_frame:
        raise MetricError(
            f"visible_per_frame must lie in [0, {cfg.patches_per_frame}], "
            f"got {visible_per_frame}"
        )
    if text_len > cfg.max_text_len:
        raise MetricError(f"text_len {text_len} exceeds max {cfg.max_text_len}")
    return FlopsReport(
        video=SubnetReport(video_param_count(cfg), video_flops(cfg, frames, visible_per_frame)),
        text=SubnetReport(text_param_count(cfg), text_flops(cfg, text_len)),
        heads=SubnetReport(head_param_count(cfg), head_flops(cfg)),
        frames=frames,
        visible_per_frame=visible_per_frame,
        text_len=text_len,
    )


def report_for_mask_ratio(cfg: EncoderConfig, mask_ratio: float, frames: int | None = None,
                          text_len: int | None = None) -> FlopsReport:
    """Counter entry point used by the CLI: ratio -> visible count."""
    n = cfg.patches_per_frame
    visible = n - masked_count(mask_ratio, n)
    return count_params_flops(
        cfg,
        frames=cfg.max_frames if frames is None else frames,
        visible_per_frame=visible,
        text_len=cfg.max_text_len if text_len is None else text_len,
    )
