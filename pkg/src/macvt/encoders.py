"""Dual-stream encoders joined only by the contrastive objective.

The video encoder alternates temporal attention (tokens sharing a spatial
patch index, across frames) with spatial attention (tokens sharing a
frame), realized as attention over the visible set under additive -1e9
biases for disallowed pairs; ragged temporal groups under random masking
fall out of the bias for free. One global video [CLS] token attends to and
is attended by every visible token in both sub-attentions. Single-frame
input skips the temporal sub-attention entirely, so an image behaves like
a spatial-only encoder.

The text encoder is a plain pre-norm transformer over [CLS] + tokens with
[PAD] keys suppressed by the same additive-bias trick.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    NEG_INF_BIAS,
    Parameter,
    Tensor,
    add,
    concat,
    embedding_lookup,
    gelu,
    l2_normalize_lastdim,
    layernorm,
    matmul,
    reshape,
    scale,
    softmax_lastdim,
    tile_leading,
    transpose,
)
from .video import MaskPlan, VideoClip, embed_visible_batch, patchify

LAYERNORM_EPS = 1e-5
INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    """Everything that fixes the parameter shapes of both encoders."""

    video_depth: int = 2
    video_width: int = 64
    video_heads: int = 4
    mlp_ratio: float = 4.0
    patch_size: int = 8
    frame_size: int = 32
    max_frames: int = 4
    text_depth: int = 2
    text_width: int = 64
    text_heads: int = 4
    max_text_len: int = 16
    text_positions: int = 16
    vocab_size: int = 32
    proj_dim: int = 32

    def __post_init__(self):
        if self.video_width % self.video_heads:
            raise ValueError("video width must be divisible by the head count")
        if self.text_width % self.text_heads:
            raise ValueError("text width must be divisible by the head count")
        if self.frame_size % self.patch_size:
            raise ValueError("frame size must be divisible by the patch size")
        if self.text_positions < self.max_text_len:
            raise ValueError("text position table shorter than max text length")

    @property
    def patches_per_frame(self) -> int:
        return (self.frame_size // self.patch_size) ** 2

    @property
    def video_mlp_width(self) -> int:
        return int(self.video_width * self.mlp_ratio)

    @property
    def text_mlp_width(self) -> int:
        return int(self.text_width * self.mlp_ratio)


def desk_config(vocab_size: int = 32) -> EncoderConfig:
    """Tiny configuration used for actual training runs."""
    return EncoderConfig(vocab_size=vocab_size)


def paper_scale_config() -> EncoderConfig:
    """Full-size configuration; exists for parameter/FLOPs accounting."""
    return EncoderConfig(
        video_depth=12, video_width=768, video_heads=12, mlp_ratio=4.0,
        patch_size=16, frame_size=224, max_frames=4,
        text_depth=6, text_width=768, text_heads=12,
        max_text_len=128, text_positions=512, vocab_size=30522,
        proj_dim=256,
    )


@dataclass
class EmbeddingBatch:
    """Index-aligned unit-norm projections of the two [CLS] outputs."""

    video: Tensor  # (B, proj_dim)
    text: Tensor   # (B, proj_dim)

    def __post_init__(self):
        if self.video.shape != self.text.shape:
            raise ValueError(
                f"video/text embedding shapes differ: {self.video.shape} vs {self.text.shape}"
            )

    @property
    def batch_size(self) -> int:
        return self.video.shape[0]


def _trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD,
                  bound: float = 2.0) -> np.ndarray:
    """Resample draws outside +-bound sigma, then scale by std."""
    x = rng.standard_normal(shape)
    while True:
        bad = np.abs(x) > bound
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return x * std


def temporal_attention_bias(spatial_idx: np.ndarray, dtype) -> np.ndarray:
    """(B, 1, T, T) additive bias: allow same-spatial-index pairs and [CLS]."""
    b, k = spatial_idx.shape
    t = k + 1
    bias = np.full((b, 1, t, t), NEG_INF_BIAS, dtype=dtype)
    same = spatial_idx[:, :, None] == spatial_idx[:, None, :]
    bias[:, 0, 1:, 1:] = np.where(same, 0.0, NEG_INF_BIAS)
    bias[:, 0, 0, :] = 0.0
    bias[:, 0, :, 0] = 0.0
    return bias


def spatial_attention_bias(frame_idx: np.ndarray, dtype) -> np.ndarray:
    """(B, 1, T, T) additive bias: allow same-frame pairs and [CLS]."""
    b, k = frame_idx.shape
    t = k + 1
    bias = np.full((b, 1, t, t), NEG_INF_BIAS, dtype=dtype)
    same = frame_idx[:, :, None] == frame_idx[:, None, :]
    bias[:, 0, 1:, 1:] = np.where(same, 0.0, NEG_INF_BIAS)
    bias[:, 0, 0, :] = 0.0
    bias[:, 0, :, 0] = 0.0
    return bias


def padding_attention_bias(lengths: np.ndarray, max_len: int, dtype) -> np.ndarray:
    """(B, 1, L, L) additive bias suppressing [PAD] positions as keys."""
    b = len(lengths)
    bias = np.zeros((b, 1, max_len, max_len), dtype=dtype)
    for i, n in enumerate(lengths):
        bias[i, 0, :, int(n):] = NEG_INF_BIAS
    return bias


class DualEncoder:
    """Video encoder, text encoder, projection heads, and temperature.

    All parameters live in one name -> Parameter registry so the
    optimizer, the checkpoint format, and the analytic counter see the
    same flat view.
    """

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32,
                 tau_init: float = 0.07, tau_learnable: bool = True):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Parameter] = {}
        self._init(seed, tau_init, tau_learnable)

    # -- construction ------------------------------------------------------

    def _add(self, name: str, values: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        p = Parameter(name, np.ascontiguousarray(values, dtype=self.dtype))
        self.params[name] = p
        return p

    def _init(self, seed: int, tau_init: float, tau_learnable: bool):
        cfg = self.cfg
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
        tn = lambda *shape: _trunc_normal(rng, shape)
        d, h = cfg.video_width, cfg.video_mlp_width

        self._add("video.cls", tn(1, d))
        self._add("video.patch.w", tn(cfg.patch_size * cfg.patch_size * 3, d))
        self._add("video.patch.b", np.zeros(d))
        self._add("video.pos_s", tn(cfg.patches_per_frame, d))
        self._add("video.pos_t", tn(cfg.max_frames, d))
        for i in range(cfg.video_depth):
            base = f"video.block{i}"
            self._add_ln(f"{base}.ln_t", d)
            # Temporal attention output starts at zero so that an untrained
            # encoder behaves like its spatial-only counterpart on frame one.
            self._add_attn(f"{base}.attn_t", d, tn, zero_out=True)
            self._add_ln(f"{base}.ln_s", d)
            self._add_attn(f"{base}.attn_s", d, tn, zero_out=False)
            self._add_ln(f"{base}.ln_m", d)
            self._add_mlp(f"{base}.mlp", d, h, tn)
        self._add_ln("video.norm", d)

        dt, ht = cfg.text_width, cfg.text_mlp_width
        self._add("text.tok", tn(cfg.vocab_size, dt))
        self._add("text.pos", tn(cfg.text_positions, dt))
        for i in range(cfg.text_depth):
            base = f"text.block{i}"
            self._add_ln(f"{base}.ln_a", dt)
            self._add_attn(f"{base}.attn", dt, tn, zero_out=False)
            self._add_ln(f"{base}.ln_m", dt)
            self._add_mlp(f"{base}.mlp", dt, ht, tn)
        self._add_ln("text.norm", dt)

        self._add("head.video.w", tn(d, cfg.proj_dim))
        self._add("head.video.b", np.zeros(cfg.proj_dim))
        self._add("head.text.w", tn(dt, cfg.proj_dim))
        self._add("head.text.b", np.zeros(cfg.proj_dim))

        self.tau_learnable = tau_learnable
        if tau_init <= 0:
            raise ValueError(f"temperature must be positive, got {tau_init}")
        self._add("objective.log_tau", np.asarray(math.log(tau_init)))

    def _add_attn(self, base: str, d: int, tn, zero_out: bool):
        for name in ("wq", "wk", "wv"):
            self._add(f"{base}.{name}", tn(d, d))
        self._add(f"{base}.wo", np.zeros((d, d)) if zero_out else tn(d, d))
        for name in ("bq", "bk", "bv", "bo"):
            self._add(f"{base}.{name}", np.zeros(d))

    def _add_ln(self, base: str, d: int):
        self._add(f"{base}.g", np.ones(d))
        self._add(f"{base}.b", np.zeros(d))

    def _add_mlp(self, base: str, d: int, hidden: int, tn):
        self._add(f"{base}.w1", tn(d, hidden))
        self._add(f"{base}.b1", np.zeros(hidden))
        self._add(f"{base}.w2", tn(hidden, d))
        self._add(f"{base}.b2", np.zeros(d))

    # -- registry ----------------------------------------------------------

    def p(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> dict[str, Parameter]:
        return self.params

    def param_counts(self) -> dict[str, int]:
        """Parameter totals per sub-network (temperature excluded)."""
        groups = {"video": 0, "text": 0, "heads": 0}
        for name, p in self.params.items():
            if name.startswith("video."):
                groups["video"] += p.data.size
            elif name.startswith("text."):
                groups["text"] += p.data.size
            elif name.startswith("head."):
                groups["heads"] += p.data.size
        return groups

    def temperature(self) -> float:
        return float(np.exp(self.p("objective.log_tau").data))

    def clamp_temperature(self, tau_min: float = 0.01, tau_max: float = 1.0):
        p = self.p("objective.log_tau")
        p.data = np.clip(p.data, math.log(tau_min), math.log(tau_max))

    # -- forward passes ------------------------------------------------------

    def _attend(self, x: Tensor, bias: np.ndarray, base: str, heads: int) -> Tensor:
        b, t, d = x.shape
        hd = d // heads
        parts = []
        for name in ("q", "k", "v"):
            y = add(matmul(x, self.p(f"{base}.w{name}")), self.p(f"{base}.b{name}"))
            parts.append(transpose(reshape(y, (b, t, heads, hd)), (0, 2, 1, 3)))
        q, k, v = parts
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        scores = add(scores, Tensor(bias))
        weights = softmax_lastdim(scores)
        ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
        return add(matmul(ctx, self.p(f"{base}.wo")), self.p(f"{base}.bo"))

    def _ln(self, x: Tensor, base: str) -> Tensor:
        return layernorm(x, self.p(f"{base}.g"), self.p(f"{base}.b"), LAYERNORM_EPS)

    def _mlp(self, x: Tensor, base: str) -> Tensor:
        y = gelu(add(matmul(x, self.p(f"{base}.w1")), self.p(f"{base}.b1")))
        return add(matmul(y, self.p(f"{base}.w2")), self.p(f"{base}.b2"))

    def encode_video(self, tokens: Tensor, frame_idx: np.ndarray,
                     spatial_idx: np.ndarray, num_frames: int) -> Tensor:
        """Visible token embeddings (B, K, D) -> video [CLS] rows (B, D)."""
        if tokens.ndim != 3 or tokens.shape[1] < 1:
            raise ValueError(f"need (B, K>=1, D) visible tokens, got {tokens.shape}")
        cfg = self.cfg
        b = tokens.shape[0]
        x = concat([tile_leading(self.p("video.cls"), b), tokens], axis=1)
        spatial_bias = spatial_attention_bias(frame_idx, self.dtype)
        temporal_bias = None
        if num_frames > 1:
            temporal_bias = temporal_attention_bias(spatial_idx, self.dtype)
        for i in range(cfg.video_depth):
            base = f"video.block{i}"
            if temporal_bias is not None:
                x = add(x, self._attend(self._ln(x, f"{base}.ln_t"), temporal_bias,
                                        f"{base}.attn_t", cfg.video_heads))
            x = add(x, self._attend(self._ln(x, f"{base}.ln_s"), spatial_bias,
                                    f"{base}.attn_s", cfg.video_heads))
            x = add(x, self._mlp(self._ln(x, f"{base}.ln_m"), f"{base}.mlp"))
        return self._ln(x, "video.norm")[:, 0, :]

    def encode_video_clips(self, clips: list[VideoClip], plans: list[MaskPlan]) -> Tensor:
        """Full visible pipeline: patchify, gather, embed, encode."""
        num_frames = {c.num_frames for c in clips}
        if len(num_frames) != 1:
            raise ValueError(f"clips in a batch must share a frame count, got {num_frames}")
        items = [(patchify(c, self.cfg.patch_size), plan) for c, plan in zip(clips, plans)]
        tokens, fidx, sidx = embed_visible_batch(
            items, self.p("video.patch.w"), self.p("video.patch.b"),
            self.p("video.pos_s"), self.p("video.pos_t"))
        return self.encode_video(tokens, fidx, sidx, num_frames.pop())

    def encode_text(self, ids: np.ndarray, lengths: np.ndarray) -> Tensor:
        """Padded id matrix (B, L) -> text [CLS] rows (B, D)."""
        cfg = self.cfg
        ids = np.asarray(ids, dtype=np.int64)
        b, l = ids.shape
        x = reshape(embedding_lookup(self.p("text.tok"), ids.reshape(-1)), (b, l, cfg.text_width))
        x = add(x, embedding_lookup(self.p("text.pos"), np.arange(l, dtype=np.int64)))
        bias = padding_attention_bias(lengths, l, self.dtype)
        for i in range(cfg.text_depth):
            base = f"text.block{i}"
            x = add(x, self._attend(self._ln(x, f"{base}.ln_a"), bias,
                                    f"{base}.attn", cfg.text_heads))
            x = add(x, self._mlp(self._ln(x, f"{base}.ln_m"), f"{base}.mlp"))
        return self._ln(x, "text.norm")[:, 0, :]

    def project(self, v_cls: Tensor, t_cls: Tensor) -> EmbeddingBatch:
        """Independent linear heads into the shared space, then unit norm."""
        v = add(matmul(v_cls, self.p("head.video.w")), self.p("head.video.b"))
        t = add(matmul(t_cls, self.p("head.text.w")), self.p("head.text.b"))
        return EmbeddingBatch(video=l2_normalize_lastdim(v), text=l2_normalize_lastdim(t))

    def encode_texts(self, seqs) -> Tensor:
        ids = np.stack([s.ids for s in seqs])
        lengths = np.asarray([s.length for s in seqs], dtype=np.int64)
        return self.encode_text(ids, lengths)
