"""Synthetic paired clips + captions, and the on-disk container format.

Each sample is one (color, shape, motion) factor combination: a colored
shape slides along a motion-specific lane, wrapping around the frame. The
caption template "a {color} {shape} moving {motion}" is bijective, so a
caption parses back to its factors. A container is a directory holding
manifest.jsonl plus one raw clip file per sample (magic "MACV1", then
M, H, W, C as little-endian u32, then row-major uint8 samples).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CLIP_MAGIC = b"MACV1"
CLIP_HEADER = struct.Struct("<4I")

COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 64, 255),
    "yellow": (255, 255, 0),
    "magenta": (255, 0, 255),
    "cyan": (0, 255, 255),
    "white": (255, 255, 255),
    "orange": (255, 128, 0),
}
SHAPES = ("square", "circle", "triangle", "cross", "diamond", "ring", "hbar", "vbar")
MOTIONS = ("left", "right", "up", "down", "diagonal")

_BOX = 16       # shape bounding box in pixels
_SPEED = 4      # pixels moved per frame along the lane


class DataFormatError(ValueError):
    """A container file violates the documented byte layout."""


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    count: int = 256
    frame_size: int = 32
    frames: int = 8
    shapes: int = len(SHAPES)
    colors: int = len(COLORS)
    motions: int = len(MOTIONS)
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.shapes <= len(SHAPES):
            raise ValueError(f"shapes must be 1..{len(SHAPES)}")
        if not 1 <= self.colors <= len(COLORS):
            raise ValueError(f"colors must be 1..{len(COLORS)}")
        if not 1 <= self.motions <= len(MOTIONS):
            raise ValueError(f"motions must be 1..{len(MOTIONS)}")
        if self.count > self.shapes * self.colors * self.motions:
            raise ValueError(
                f"count {self.count} exceeds the {self.shapes * self.colors * self.motions} "
                "distinct factor combinations"
            )
        if self.frame_size < 2 * _BOX:
            raise ValueError(f"frame size must be at least {2 * _BOX}")

    def to_dict(self) -> dict:
        return {
            "count": self.count, "frame_size": self.frame_size, "frames": self.frames,
            "shapes": self.shapes, "colors": self.colors, "motions": self.motions,
            "seed": self.seed,
        }


@dataclass
class Sample:
    sample_id: str
    caption: str
    frames: np.ndarray  # (M, H, W, 3) uint8
    latents: dict


def caption_for(color: str, shape: str, motion: str) -> str:
    return f"a {color} {shape} moving {motion}"


def parse_caption(caption: str):
    """Inverse of caption_for; raises on anything off-template."""
    words = caption.split(" ")
    if len(words) != 5 or words[0] != "a" or words[3] != "moving":
        raise DataFormatError(f"caption off template: {caption!r}")
    color, shape, motion = words[1], words[2], words[4]
    if color not in COLORS or shape not in SHAPES or motion not in MOTIONS:
        raise DataFormatError(f"caption names unknown factors: {caption!r}")
    return color, shape, motion


def _shape_mask(shape: str) -> np.ndarray:
    yy, xx = np.mgrid[0:_BOX, 0:_BOX].astype(np.float64)
    c = (_BOX - 1) / 2.0
    if shape == "square":
        return np.ones((_BOX, _BOX), dtype=bool)
    if shape == "circle":
        return (yy - c) ** 2 + (xx - c) ** 2 <= c * c
    if shape == "triangle":
        return xx <= yy
    if shape == "cross":
        return (np.abs(yy - c) < 3.5) | (np.abs(xx - c) < 3.5)
    if shape == "diamond":
        return np.abs(yy - c) + np.abs(xx - c) <= c
    if shape == "ring":
        r2 = (yy - c) ** 2 + (xx - c) ** 2
        return (r2 <= c * c) & (r2 >= (c - 4.0) ** 2)
    if shape == "hbar":
        return (yy >= _BOX // 4) & (yy < _BOX - _BOX // 4)
    if shape == "vbar":
        return (xx >= _BOX // 4) & (xx < _BOX - _BOX // 4)
    raise DataFormatError(f"unknown shape {shape!r}")


def _lane_position(motion: str, step: int, size: int):
    """Top-left corner of the shape box at a given step along its lane.

    Lanes are spatially separated per motion so a single frame already
    carries motion information; the sign of travel along the lane is what
    only multiple frames can reveal.
    """
    far = size - _BOX
    s = (step * _SPEED) % size
    if motion == "left":
        return 0, (size - s) % size
    if motion == "right":
        return far, s
    if motion == "up":
        return (size - s) % size, 0
    if motion == "down":
        return s, far
    if motion == "diagonal":
        return s, s
    raise DataFormatError(f"unknown motion {motion!r}")


def render_clip(color: str, shape: str, motion: str, frames: int, size: int,
                phase: int = 0) -> np.ndarray:
    """Deterministic clip for one factor tuple; phase shifts the start."""
    mask = _shape_mask(shape)
    rgb = np.array(COLORS[color], dtype=np.uint8)
    clip = np.zeros((frames, size, size, 3), dtype=np.uint8)
    ys, xs = np.nonzero(mask)
    for f in range(frames):
        top, left = _lane_position(motion, f + phase, size)
        clip[f, (top + ys) % size, (left + xs) % size] = rgb
    return clip


def write_clip(path, frames: np.ndarray):
    frames = np.ascontiguousarray(frames, dtype=np.uint8)
    m, h, w, c = frames.shape
    with open(path, "wb") as fh:
        fh.write(CLIP_MAGIC)
        fh.write(CLIP_HEADER.pack(m, h, w, c))
        fh.write(frames.tobytes())


def read_clip(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(CLIP_MAGIC)] != CLIP_MAGIC:
        raise DataFormatError(f"{path}: bad clip magic")
    off = len(CLIP_MAGIC)
    if len(raw) < off + CLIP_HEADER.size:
        raise DataFormatError(f"{path}: truncated clip header")
    m, h, w, c = CLIP_HEADER.unpack_from(raw, off)
    body = raw[off + CLIP_HEADER.size:]
    if c != 3:
        raise DataFormatError(f"{path}: expected 3 channels, header says {c}")
    if len(body) != m * h * w * c:
        raise DataFormatError(
            f"{path}: payload holds {len(body)} bytes, header implies {m * h * w * c}"
        )
    return np.frombuffer(body, dtype=np.uint8).reshape(m, h, w, c).copy()


def generate_dataset(spec: SyntheticDatasetSpec, out_dir) -> Path:
    """Write a container; byte-identical for identical specs."""
    out = Path(out_dir)
    (out / "clips").mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    combos = [
        (c, s, m)
        for c in list(COLORS)[: spec.colors]
        for s in SHAPES[: spec.shapes]
        for m in MOTIONS[: spec.motions]
    ]
    order = rng.permutation(len(combos))[: spec.count]
    records = []
    for i, combo_idx in enumerate(order):
        color, shape, motion = combos[combo_idx]
        phase = int(rng.integers(0, spec.frame_size // _SPEED))
        sample_id = f"{i:06d}"
        clip = render_clip(color, shape, motion, spec.frames, spec.frame_size, phase)
        rel = f"clips/{sample_id}.macv"
        write_clip(out / rel, clip)
        records.append({
            "id": sample_id,
            "caption": caption_for(color, shape, motion),
            "clip": rel,
            "latents": {"color": color, "shape": shape, "motion": motion, "phase": phase},
        })
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out


def load_dataset(container_dir) -> list[Sample]:
    """Eagerly load a container (desk-scale datasets are a few MB)."""
    root = Path(container_dir)
    manifest = root / "manifest.jsonl"
    if not manifest.is_file():
        raise DataFormatError(f"{root}: missing manifest.jsonl")
    samples = []
    with open(manifest, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as err:
                raise DataFormatError(f"{manifest}:{line_no}: invalid JSON record") from err
            for key in ("id", "caption", "clip"):
                if key not in rec:
                    raise DataFormatError(f"{manifest}:{line_no}: record lacks {key!r}")
            frames = read_clip(root / rec["clip"])
            samples.append(Sample(rec["id"], rec["caption"], frames, rec.get("latents", {})))
    if not samples:
        raise DataFormatError(f"{root}: container holds no samples")
    return samples
