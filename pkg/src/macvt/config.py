"""Flat run configuration shared by the CLI and the trainer.

One JSON document covers encoder shapes, schedule, masking, contrastive
settings and paths. Unknown keys are rejected so a typo cannot silently
fall back to a default, and every command echoes its resolved RunConfig
so runs can be reproduced from their own output.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

from .encoders import EncoderConfig
from .objective import ContrastiveConfig


class ConfigError(ValueError):
    """Unknown/invalid configuration key or value, named in the message."""


@dataclass
class TrainConfig:
    """Two-stage schedule: stage A on single frames, stage B on clips."""

    epochs_a: int = 14
    epochs_b: int = 10
    batch_size: int = 32
    lr_a: float = 1e-3
    lr_b: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 8
    mask_ratio_video: float = 0.6
    mask_ratio_text: float = 0.15
    video_mask_strategy: str = "random"   # random | tube | none
    masked_modalities: str = "both"       # both | video | text | none
    frames_train: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.masked_modalities not in ("both", "video", "text", "none"):
            raise ConfigError(
                f"masked_modalities must be both/video/text/none, got {self.masked_modalities!r}"
            )
        if self.video_mask_strategy not in ("random", "tube", "none"):
            raise ConfigError(
                f"video_mask_strategy must be random/tube/none, got {self.video_mask_strategy!r}"
            )

    def effective_ratios(self) -> tuple[float, float]:
        rv = self.mask_ratio_video if self.masked_modalities in ("both", "video") else 0.0
        rt = self.mask_ratio_text if self.masked_modalities in ("both", "text") else 0.0
        return rv, rt


_ENCODER_FIELDS = {f.name for f in dataclasses.fields(EncoderConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_CONTRASTIVE_MAP = {  # flat key -> ContrastiveConfig field
    "tau_init": "tau_init",
    "tau_learnable": "learnable",
    "tau_min": "tau_min",
    "tau_max": "tau_max",
}
_PATH_FIELDS = {"data_dir", "out_dir"}


@dataclass
class RunConfig:
    """Union of all sub-configurations as one flat document."""

    encoder: EncoderConfig
    train: TrainConfig
    contrastive: ContrastiveConfig
    data_dir: str | None = None
    out_dir: str | None = None

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls(EncoderConfig(), TrainConfig(), ContrastiveConfig())

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        enc, tr, con, paths = {}, {}, {}, {}
        for key, value in doc.items():
            if key in _ENCODER_FIELDS:
                enc[key] = value
            elif key in _TRAIN_FIELDS:
                tr[key] = value
            elif key in _CONTRASTIVE_MAP:
                con[_CONTRASTIVE_MAP[key]] = value
            elif key in _PATH_FIELDS:
                paths[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            return cls(EncoderConfig(**enc), TrainConfig(**tr), ContrastiveConfig(**con), **paths)
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err

    @classmethod
    def from_json_file(cls, path) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from err
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self.encoder)
        doc.update(dataclasses.asdict(self.train))
        for flat_key, field in _CONTRASTIVE_MAP.items():
            doc[flat_key] = getattr(self.contrastive, field)
        doc["data_dir"] = self.data_dir
        doc["out_dir"] = self.out_dir
        return doc

    def replace(self, **kwargs) -> "RunConfig":
        doc = self.to_dict()
        doc.update(kwargs)
        return RunConfig.from_dict(doc)
