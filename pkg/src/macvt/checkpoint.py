"""Binary checkpoint format.

Layout: magic "MACCKPT1", then a payload of [version u32, entry count u32,
entries...], then CRC32(payload) as u32. Every scalar is little-endian.
An entry is: name length u16, UTF-8 name, rank u8, one u32 per dim, then
float32 values. The CRC is verified before any entry is parsed, so a
truncated or corrupted file never exposes partial state.

Model state, optimizer moments, the RNG counters and a JSON config echo
are all stored as named entries; integers wider than float32's exact
range are split into 16-bit halves, and the config echo is byte-coded.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"MACCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    """Bad magic/version/CRC or a shape clash, naming the offending part."""


def save_entries(path, entries: dict[str, np.ndarray]):
    """Write named float32 arrays in the given order."""
    payload = bytearray()
    payload += struct.pack("<II", CKPT_VERSION, len(entries))
    for name, values in entries.items():
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF:
            raise CheckpointError(f"entry name too long: {name!r}")
        arr = np.ascontiguousarray(values, dtype="<f4")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"entry rank too large for {name!r}")
        payload += struct.pack("<H", len(raw_name)) + raw_name
        payload += struct.pack("<B", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}I", *arr.shape)
        payload += arr.tobytes()
    blob = CKPT_MAGIC + bytes(payload) + struct.pack("<I", zlib.crc32(bytes(payload)))
    Path(path).write_bytes(blob)


def load_entries(path) -> dict[str, np.ndarray]:
    """Read all entries back, in file order."""
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    if len(raw) < len(CKPT_MAGIC) + 12:
        raise CheckpointError(f"{path}: file too short for header and CRC")
    payload, (stored_crc,) = raw[len(CKPT_MAGIC):-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointError(f"{path}: CRC mismatch, file truncated or corrupted")
    version, count = struct.unpack_from("<II", payload, 0)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = 8
    entries: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", payload, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", payload, off)
        off += 4 * rank
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(payload, dtype="<f4", count=n_values, offset=off)
        off += 4 * n_values
        entries[name] = values.reshape(dims).copy()
    if off != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - off} trailing payload bytes")
    return entries


def _split_u32(value: int) -> np.ndarray:
    """Split an unsigned 32-bit int into two float32-exact 16-bit halves."""
    value = int(value)
    if not 0 <= value < 2 ** 32:
        raise CheckpointError(f"counter {value} outside u32 range")
    return np.asarray([value >> 16, value & 0xFFFF], dtype=np.float32)


def _join_u32(pair: np.ndarray) -> int:
    hi, lo = (int(x) for x in pair)
    return (hi << 16) | lo


def encode_text_entry(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text_entry(values: np.ndarray) -> str:
    return values.astype(np.uint8).tobytes().decode("utf-8")


def save_checkpoint(path, model, optimizer=None, seed: int = 0, step: int = 0,
                    config: dict | None = None):
    """Serialize a model (and optionally optimizer/RNG/config) to one file."""
    entries: dict[str, np.ndarray] = {}
    for name, p in model.parameters().items():
        entries[name] = p.data
    if optimizer is not None:
        entries["opt.step"] = _split_u32(optimizer.step_count)
        for name in model.parameters():
            entries[f"opt.m.{name}"] = optimizer.m[name]
            entries[f"opt.v.{name}"] = optimizer.v[name]
    entries["rng.seed"] = _split_u32(seed)
    entries["rng.step"] = _split_u32(step)
    if config is not None:
        entries["config.json"] = encode_text_entry(json.dumps(config, sort_keys=True))
    save_entries(path, entries)


def restore_model(path, model) -> dict[str, np.ndarray]:
    """Load entries into a model, validating every shape; returns the rest."""
    entries = load_entries(path)
    for name, p in model.parameters().items():
        if name not in entries:
            raise CheckpointError(f"{path}: checkpoint lacks parameter {name!r}")
        stored = entries.pop(name)
        if stored.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {stored.shape}, "
                f"model expects {p.data.shape}"
            )
        p.data = stored.astype(model.dtype)
    return entries


def read_config_echo(path) -> dict | None:
    entries = load_entries(path)
    if "config.json" not in entries:
        return None
    return json.loads(decode_text_entry(entries["config.json"]))


def read_counters(entries: dict[str, np.ndarray]) -> tuple[int, int]:
    """(seed, step) from a restored entry dict, zeros if absent."""
    seed = _join_u32(entries["rng.seed"]) if "rng.seed" in entries else 0
    step = _join_u32(entries["rng.step"]) if "rng.step" in entries else 0
    return seed, step
