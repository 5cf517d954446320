"""Two-stage training loop, evaluation and the masked-view probe.

Stage A samples a single frame per clip (image-style alignment), stage B
samples strided multi-frame windows. Every random draw - frame choice,
video mask, text mask, epoch shuffle - comes from a counter-derived seed
stream, so a (seed, config, dataset) triple maps to bit-identical
checkpoints. Evaluation never masks: retrieval runs on full clips and
unmasked captions regardless of the ratios used in training.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError, Parameter, Tape
from .checkpoint import save_checkpoint
from .config import ConfigError, RunConfig, TrainConfig
from .data import Sample
from .encoders import DualEncoder, EncoderConfig
from .objective import ContrastiveConfig, alignment_margin, infonce_loss
from .text import TextSequence, Vocabulary, apply_text_mask, sample_text_mask, tokenize
from .video import VideoClip, sample_mask

# Leaf names of parameters that receive weight decay (projection matrices;
# embeddings, gains, biases and the temperature are exempt).
_DECAYED_LEAVES = {"w", "w1", "w2", "wq", "wk", "wv", "wo"}


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; the last good checkpoint was kept."""


def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence(tuple(int(k) for k in key)).generate_state(1)[0])


def _derived_rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(tuple(int(k) for k in key))))


class Adam:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: dict[str, Parameter], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, params: dict[str, Parameter], lr: float):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            v = self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            if self.weight_decay and name.rsplit(".", 1)[-1] in _DECAYED_LEAVES:
                update = update + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)


def train_frame_indices(rng: np.random.Generator, stored: int, m: int) -> np.ndarray:
    """Stage A: one uniform frame. Stage B: stride with a random phase."""
    if m == 1:
        return np.asarray([int(rng.integers(0, stored))])
    if stored < m:
        raise ConfigError(f"clip stores {stored} frames, cannot sample {m}")
    stride = stored // m
    max_phase = stored - (m - 1) * stride - 1
    phase = int(rng.integers(0, max_phase + 1))
    return phase + stride * np.arange(m)


def eval_frame_indices(stored: int, m: int) -> np.ndarray:
    """Deterministic evenly spaced frames used by evaluation and probes."""
    m = min(m, stored)
    return ((np.arange(m) + 0.5) * stored / m).astype(np.int64)


@dataclass
class TrainResult:
    model: DualEncoder
    vocab: Vocabulary
    logs: list[dict]
    checkpoint_path: Path | None


def _snapshot(model: DualEncoder, opt: Adam):
    return (
        {name: p.data.copy() for name, p in model.parameters().items()},
        {name: a.copy() for name, a in opt.m.items()},
        {name: a.copy() for name, a in opt.v.items()},
        opt.step_count,
    )


def _restore(model: DualEncoder, opt: Adam, snap):
    params, m, v, step_count = snap
    for name, p in model.parameters().items():
        p.data = params[name].copy()
    opt.m = {name: a.copy() for name, a in m.items()}
    opt.v = {name: a.copy() for name, a in v.items()}
    opt.step_count = step_count


def build_model(encoder_cfg: EncoderConfig, contrastive: ContrastiveConfig,
                vocab: Vocabulary, seed: int) -> tuple[EncoderConfig, DualEncoder]:
    """Instantiate the dual encoder with the vocabulary's actual size."""
    cfg = dataclasses.replace(encoder_cfg, vocab_size=len(vocab))
    model = DualEncoder(cfg, seed=seed, tau_init=contrastive.tau_init,
                        tau_learnable=contrastive.learnable)
    return cfg, model


def train(samples: list[Sample], run: RunConfig, out_dir=None,
          vocab: Vocabulary | None = None) -> TrainResult:
    """Run the full two-stage schedule over a loaded dataset."""
    cfg: TrainConfig = run.train
    if not samples:
        raise ConfigError("dataset is empty")
    if cfg.batch_size > len(samples):
        raise ConfigError(
            f"batch_size {cfg.batch_size} exceeds dataset size {len(samples)}"
        )
    if vocab is None:
        vocab = Vocabulary.build(s.caption for s in samples)
    enc_cfg, model = build_model(run.encoder, run.contrastive, vocab, cfg.seed)
    resolved = run.replace(vocab_size=enc_cfg.vocab_size)
    opt = Adam(model.parameters(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    sequences = [tokenize(s.caption, vocab, enc_cfg.max_text_len) for s in samples]

    rho_v, rho_t = cfg.effective_ratios()
    strategy = cfg.video_mask_strategy if rho_v > 0 else "none"
    n_patches = enc_cfg.patches_per_frame
    log_tau = model.p("objective.log_tau")
    tau_arg = log_tau if run.contrastive.learnable else run.contrastive.tau_init

    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        vocab.save(out / "vocab.txt")

    stages = [
        ("A", 1, cfg.epochs_a, cfg.lr_a),
        ("B", cfg.frames_train, cfg.epochs_b, cfg.lr_b),
    ]
    logs: list[dict] = []
    global_epoch = 0
    total_steps = 0
    last_good = _snapshot(model, opt)

    def finish() -> Path | None:
        if out is None:
            return None
        path = out / "checkpoint.macckpt"
        save_checkpoint(path, model, opt, seed=cfg.seed, step=total_steps,
                        config=resolved.to_dict())
        with open(out / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for rec in logs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path

    for stage_idx, (stage, m_frames, n_epochs, base_lr) in enumerate(stages):
        for epoch in range(n_epochs):
            lr = base_lr * (cfg.lr_decay_factor ** (epoch // max(1, cfg.lr_decay_every)))
            order = _derived_rng(cfg.seed, 101, stage_idx, epoch).permutation(len(samples))
            losses, margins = [], []
            for step, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch_ids = order[start:start + cfg.batch_size]
                clips, plans, masked_seqs = [], [], []
                for pos, sample_idx in enumerate(batch_ids):
                    sample = samples[sample_idx]
                    seeds = np.random.SeedSequence(
                        (cfg.seed, stage_idx, epoch, step, int(pos))).generate_state(3)
                    frame_rng = np.random.Generator(np.random.PCG64(int(seeds[0])))
                    idx = train_frame_indices(frame_rng, sample.frames.shape[0], m_frames)
                    clips.append(VideoClip(sample.frames[idx], sample.sample_id))
                    plans.append(sample_mask(strategy, rho_v, len(idx), n_patches,
                                             int(seeds[1])))
                    seq = sequences[sample_idx]
                    plan = sample_text_mask(seq, rho_t, int(seeds[2]))
                    masked_seqs.append(apply_text_mask(seq, plan))
                try:
                    with Tape() as tape:
                        v_cls = model.encode_video_clips(clips, plans)
                        t_cls = model.encode_texts(masked_seqs)
                        emb = model.project(v_cls, t_cls)
                        loss = infonce_loss(emb, tau_arg)
                    loss_value = loss.item()
                    if not math.isfinite(loss_value):
                        raise NonFiniteError("loss is not finite")
                    tape.backward(loss)
                    opt.step(model.parameters(), lr)
                    if run.contrastive.learnable:
                        model.clamp_temperature(run.contrastive.tau_min,
                                                run.contrastive.tau_max)
                except NonFiniteError as err:
                    _restore(model, opt, last_good)
                    path = finish()
                    raise TrainingDiverged(
                        f"stage {stage} epoch {epoch} step {step}: {err}; "
                        f"last good checkpoint retained"
                        + (f" at {path}" if path else "")
                    ) from err
                total_steps += 1
                losses.append(loss_value)
                if len(batch_ids) >= 2:
                    margins.append(alignment_margin(emb.video.data, emb.text.data))
            global_epoch += 1
            logs.append({
                "epoch": global_epoch,
                "stage": stage,
                "loss": float(np.mean(losses)),
                "margin": float(np.mean(margins)) if margins else 0.0,
                "tau": model.temperature(),
            })
            last_good = _snapshot(model, opt)

    path = finish()
    return TrainResult(model=model, vocab=vocab, logs=logs, checkpoint_path=path)


# ---------------------------------------------------------------------------
# evaluation


def encode_corpus(model: DualEncoder, vocab: Vocabulary, samples: list[Sample],
                  frames_eval: int, batch_size: int = 32):
    """Unmasked embeddings for every pair; returns (video, text) arrays."""
    videos, texts = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        clips = [
            VideoClip(s.frames[eval_frame_indices(s.frames.shape[0], frames_eval)],
                      s.sample_id)
            for s in chunk
        ]
        n_frames = {c.num_frames for c in clips}
        if len(n_frames) != 1:
            raise ConfigError("evaluation batch mixes clips of different lengths")
        m = n_frames.pop()
        n = model.cfg.patches_per_frame
        plans = [sample_mask("none", 0.0, m, n, seed=0) for _ in clips]
        seqs = [tokenize(s.caption, vocab, model.cfg.max_text_len) for s in chunk]
        v_cls = model.encode_video_clips(clips, plans)
        t_cls = model.encode_texts(seqs)
        emb = model.project(v_cls, t_cls)
        videos.append(emb.video.data.copy())
        texts.append(emb.text.data.copy())
    return np.concatenate(videos), np.concatenate(texts)


def evaluate(model: DualEncoder, vocab: Vocabulary, samples: list[Sample],
             frames_eval: int, batch_size: int = 32) -> dict:
    """Full-view retrieval in both directions (inference never masks)."""
    from .metrics import retrieval_report

    video, text = encode_corpus(model, vocab, samples, frames_eval, batch_size)
    sim = video.astype(np.float64) @ text.astype(np.float64).T
    return {
        "text_to_video": retrieval_report(sim, "text_to_video").to_dict(),
        "video_to_text": retrieval_report(sim, "video_to_text").to_dict(),
    }


# ---------------------------------------------------------------------------
# masked-view similarity probe


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    return float(a @ b / math.sqrt((a @ a) * (b @ b)))


def similarity_probe(model: DualEncoder, vocab: Vocabulary, samples: list[Sample],
                     trials: int, rho_v: float, rho_t: float, seed: int,
                     frames_eval: int = 4) -> dict:
    """Cosine trends between masked views and the full view.

    For every sample, the clip is masked ``trials`` times and the caption
    likewise; reported are masked-video vs full-video, masked-text vs
    full-text, and masked-video vs masked-text similarities.
    """
    if trials < 2:
        raise ConfigError(f"probe needs at least 2 trials, got {trials}")
    n = model.cfg.patches_per_frame
    per_sample = []
    for s_idx, sample in enumerate(samples):
        idx = eval_frame_indices(sample.frames.shape[0], frames_eval)
        clip = VideoClip(sample.frames[idx], sample.sample_id)
        seq = tokenize(sample.caption, vocab, model.cfg.max_text_len)

        # Row 0 is the full view; the full and masked views share one batch
        # so identical inputs produce bit-identical embeddings.
        plans = [sample_mask("none", 0.0, clip.num_frames, n, seed=0)]
        masked_seqs = [seq]
        for t in range(trials):
            seeds = np.random.SeedSequence((seed, s_idx, t)).generate_state(2)
            plans.append(sample_mask("random", rho_v, clip.num_frames, n, int(seeds[0])))
            plan_t = sample_text_mask(seq, rho_t, int(seeds[1]))
            masked_seqs.append(apply_text_mask(seq, plan_t))
        emb = model.project(
            model.encode_video_clips([clip] * (trials + 1), plans),
            model.encode_texts(masked_seqs),
        )
        full_v, mv = emb.video.data[0], emb.video.data[1:]
        full_t, mt = emb.text.data[0], emb.text.data[1:]
        video_sims = np.array([_cosine(mv[t], full_v) for t in range(trials)])
        text_sims = np.array([_cosine(mt[t], full_t) for t in range(trials)])
        cross_sims = np.array([_cosine(mv[t], mt[t]) for t in range(trials)])
        per_sample.append({
            "id": sample.sample_id,
            "video_mean": float(video_sims.mean()), "video_std": float(video_sims.std()),
            "text_mean": float(text_sims.mean()), "text_std": float(text_sims.std()),
            "cross_mean": float(cross_sims.mean()), "cross_std": float(cross_sims.std()),
        })
    return {
        "trials": trials,
        "mask_ratio_video": rho_v,
        "mask_ratio_text": rho_t,
        "video_mean": float(np.mean([r["video_mean"] for r in per_sample])),
        "text_mean": float(np.mean([r["text_mean"] for r in per_sample])),
        "cross_mean": float(np.mean([r["cross_mean"] for r in per_sample])),
        "samples": per_sample,
    }
