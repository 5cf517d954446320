"""Video side of the dual-masking pipeline.

Clips are split into non-overlapping spatio-temporal patches; a mask plan
selects, per frame, which spatial patch indices stay visible. Masked
patches are *dropped* before the encoder ever sees them (gather, never a
0/1 multiply), which is what shrinks the encoder's input and its compute.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, embedding_lookup, matmul, reshape

MASK_STRATEGIES = ("none", "random", "tube")


class MaskPlanError(ValueError):
    """Requested plan is degenerate or inconsistent with its inputs."""


def round_half_up(x: float) -> int:
    """Round with .5 going up; builtin round() would banker-round ties."""
    return int(np.floor(x + 0.5))


def masked_count(ratio: float, n: int) -> int:
    """Number of masked patch indices per frame for a ratio in [0, 1)."""
    return round_half_up(ratio * n)


@dataclass
class VideoClip:
    """Raw frames, (M, H, W, 3) uint8 in [0, 255], frame order = time order."""

    frames: np.ndarray
    sample_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise MaskPlanError(f"clip frames must be (M, H, W, 3), got {f.shape}")
        if f.shape[0] < 1:
            raise MaskPlanError("clip needs at least one frame")
        self.frames = f.astype(np.uint8, copy=False)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class PatchSet:
    """Flattened patches in frame-major, raster-spatial order.

    tokens[k] holds the raw uint8 samples of one P x P x 3 patch, so
    reassembly is exact; scaling to [0, 1] happens at embedding time.
    """

    tokens: np.ndarray            # (M*N, P*P*3) uint8
    frame_index: np.ndarray       # (M*N,) int64
    spatial_index: np.ndarray     # (M*N,) int64
    patch_size: int
    frames: int
    grid: tuple[int, int]         # (H/P, W/P)

    @property
    def patches_per_frame(self) -> int:
        return self.grid[0] * self.grid[1]


@dataclass
class MaskPlan:
    """Per-frame sorted visible spatial indices produced by one strategy."""

    strategy: str
    ratio: float
    visible: list[np.ndarray]     # one sorted int64 array per frame
    seed: int = 0

    @property
    def num_frames(self) -> int:
        return len(self.visible)

    @property
    def visible_per_frame(self) -> int:
        return len(self.visible[0])

    def total_visible(self) -> int:
        return sum(len(v) for v in self.visible)


def image_as_clip(image: np.ndarray, sample_id: str = "") -> VideoClip:
    """Treat a single (H, W, 3) image as a one-frame clip."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise MaskPlanError(f"image must be (H, W, 3), got {image.shape}")
    return VideoClip(frames=image[None], sample_id=sample_id)


def center_crop_resize(frames: np.ndarray, size: int) -> np.ndarray:
    """Deterministic square center crop + nearest-neighbour resize."""
    m, h, w, c = frames.shape
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    cropped = frames[:, top:top + side, left:left + side, :]
    if side == size:
        return cropped.copy()
    idx = (np.arange(size) * side // size).astype(np.int64)
    return cropped[:, idx][:, :, idx]


def patchify(clip: VideoClip, patch_size: int) -> PatchSet:
    """Split every frame into non-overlapping P x P patches."""
    m, h, w, c = clip.frames.shape
    if h % patch_size or w % patch_size:
        raise MaskPlanError(
            f"frame size {h}x{w} not divisible by patch size {patch_size}"
        )
    gh, gw = h // patch_size, w // patch_size
    n = gh * gw
    x = clip.frames.reshape(m, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (M, gh, gw, P, P, C)
    tokens = np.ascontiguousarray(x.reshape(m * n, patch_size * patch_size * c))
    frame_index = np.repeat(np.arange(m, dtype=np.int64), n)
    spatial_index = np.tile(np.arange(n, dtype=np.int64), m)
    return PatchSet(tokens, frame_index, spatial_index, patch_size, m, (gh, gw))


def unpatchify(patches: PatchSet, height: int, width: int) -> np.ndarray:
    """Exact inverse of patchify, reproducing the input frames bit for bit."""
    p = patches.patch_size
    gh, gw = patches.grid
    m = patches.frames
    x = patches.tokens.reshape(m, gh, gw, p, p, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(m, height, width, 3))


def sample_mask(strategy: str, ratio: float, num_frames: int, patches_per_frame: int,
                seed: int) -> MaskPlan:
    """Draw a mask plan.

    random: an independent uniform without-replacement draw per frame.
    tube:   one draw replicated across frames (space-time tubes).
    none:   everything visible.
    """
    if strategy not in MASK_STRATEGIES:
        raise MaskPlanError(f"unknown mask strategy {strategy!r}; use one of {MASK_STRATEGIES}")
    if not 0.0 <= ratio < 1.0:
        raise MaskPlanError(f"mask ratio must be in [0, 1), got {ratio}")
    n = patches_per_frame
    n_masked = 0 if strategy == "none" else masked_count(ratio, n)
    if n_masked >= n:
        raise MaskPlanError(
            f"ratio {ratio} masks {n_masked}/{n} patches; every frame must keep "
            "at least one visible token"
        )
    all_idx = np.arange(n, dtype=np.int64)
    if strategy == "none" or n_masked == 0:
        visible = [all_idx.copy() for _ in range(num_frames)]
        return MaskPlan(strategy, ratio, visible, seed)

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    if strategy == "tube":
        masked = rng.choice(n, size=n_masked, replace=False)
        keep = np.sort(np.setdiff1d(all_idx, masked))
        visible = [keep.copy() for _ in range(num_frames)]
    else:
        visible = []
        for _ in range(num_frames):
            masked = rng.choice(n, size=n_masked, replace=False)
            visible.append(np.sort(np.setdiff1d(all_idx, masked)))
    return MaskPlan(strategy, ratio, visible, seed)


def _check_plan(patches: PatchSet, plan: MaskPlan):
    if plan.num_frames != patches.frames:
        raise MaskPlanError(
            f"plan covers {plan.num_frames} frames but patch set has {patches.frames}"
        )
    n = patches.patches_per_frame
    for f, vis in enumerate(plan.visible):
        if len(vis) and (vis[0] < 0 or vis[-1] >= n):
            raise MaskPlanError(f"frame {f}: visible index out of range for {n} patches")


def gather_visible(patches: PatchSet, plan: MaskPlan):
    """Select visible patch rows; returns (rows, frame_idx, spatial_idx).

    The masked rows are absent from the output entirely, so their contents
    can never influence anything downstream.
    """
    _check_plan(patches, plan)
    n = patches.patches_per_frame
    rows, fidx, sidx = [], [], []
    for f, vis in enumerate(plan.visible):
        rows.append(patches.tokens[f * n + vis])
        fidx.append(np.full(len(vis), f, dtype=np.int64))
        sidx.append(vis.astype(np.int64))
    return np.concatenate(rows), np.concatenate(fidx), np.concatenate(sidx)


def embed_visible(patches: PatchSet, plan: MaskPlan, proj_w: Tensor, proj_b: Tensor,
                  pos_spatial: Tensor, pos_temporal: Tensor):
    """Project visible patches and add their positional rows.

    Output row k = proj(patch_k / 255) + E_s[spatial_k] + E_t[frame_k].
    Tokens sharing a spatial index get the same E_s row regardless of frame,
    and vice versa for E_t. Returns (tokens (K, D), frame_idx, spatial_idx).
    """
    rows, fidx, sidx = gather_visible(patches, plan)
    dtype = proj_w.dtype
    flat = Tensor(np.ascontiguousarray(rows, dtype=dtype) / dtype.type(255.0))
    x = add(matmul(flat, proj_w), proj_b)
    x = add(x, embedding_lookup(pos_spatial, sidx))
    x = add(x, embedding_lookup(pos_temporal, fidx))
    return x, fidx, sidx


def embed_visible_batch(items, proj_w: Tensor, proj_b: Tensor,
                        pos_spatial: Tensor, pos_temporal: Tensor):
    """Batched embed for samples that share a visible count.

    ``items`` is a sequence of (PatchSet, MaskPlan) pairs whose plans all
    keep the same number of tokens. Returns (tokens (B, K, D), frame_idx
    (B, K), spatial_idx (B, K)).
    """
    gathered = [gather_visible(ps, plan) for ps, plan in items]
    counts = {g[0].shape[0] for g in gathered}
    if len(counts) != 1:
        raise MaskPlanError(f"batch items disagree on visible counts: {sorted(counts)}")
    rows = np.stack([g[0] for g in gathered])
    fidx = np.stack([g[1] for g in gathered])
    sidx = np.stack([g[2] for g in gathered])
    b, k, pdim = rows.shape
    dtype = proj_w.dtype
    flat = Tensor(np.ascontiguousarray(rows, dtype=dtype).reshape(b * k, pdim) / dtype.type(255.0))
    x = add(matmul(flat, proj_w), proj_b)
    x = add(x, embedding_lookup(pos_spatial, sidx.reshape(-1)))
    x = add(x, embedding_lookup(pos_temporal, fidx.reshape(-1)))
    d = proj_w.shape[1]
    return reshape(x, (b, k, d)), fidx, sidx
