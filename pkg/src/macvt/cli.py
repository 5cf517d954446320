"""Command-line driver: gen / train / eval / flops / probe.

All machine-readable output is JSON on stdout and embeds the resolved
configuration, so any run can be reproduced from what it printed.
Exit codes: 0 success, 1 usage or configuration error, 2 data/format
error. The MAC_SEED environment variable overrides --seed everywhere.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_entries, read_config_echo, restore_model
from .config import ConfigError, RunConfig
from .data import (
    COLORS,
    MOTIONS,
    SHAPES,
    DataFormatError,
    SyntheticDatasetSpec,
    generate_dataset,
    load_dataset,
)
from .encoders import desk_config, paper_scale_config
from .metrics import report_for_mask_ratio
from .text import Vocabulary
from .train import build_model, evaluate, similarity_probe, train
from .video import MaskPlanError


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; the contract here is exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _seed_from_env(seed: int) -> int:
    raw = os.environ.get("MAC_SEED")
    if raw is None:
        return seed
    try:
        return int(raw)
    except ValueError as err:
        raise ConfigError(f"MAC_SEED must be an integer, got {raw!r}") from err


def _emit(doc: dict):
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.defaults()
    if not Path(path).is_file():
        raise ConfigError(f"--config file not found: {path}")
    return RunConfig.from_json_file(path)


def _load_model_from(ckpt_path: str):
    ckpt = Path(ckpt_path)
    if not ckpt.is_file():
        raise ConfigError(f"--ckpt file not found: {ckpt}")
    echo = read_config_echo(ckpt)
    if echo is None:
        raise CheckpointError(f"{ckpt}: checkpoint carries no config echo")
    run = RunConfig.from_dict(echo)
    vocab_path = ckpt.parent / "vocab.txt"
    if not vocab_path.is_file():
        raise DataFormatError(f"missing vocabulary file next to checkpoint: {vocab_path}")
    vocab = Vocabulary.load(vocab_path)
    _, model = build_model(run.encoder, run.contrastive, vocab, seed=run.train.seed)
    restore_model(ckpt, model)
    return model, vocab, run


def _add_gen(sub):
    p = sub.add_parser(
        "gen", help="generate a synthetic paired dataset container",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--out", required=True, help="output container directory")
    p.add_argument("--spec", help="JSON file with dataset spec fields (overrides flags)")
    p.add_argument("--count", type=int, default=256, help="number of pairs")
    p.add_argument("--frames", type=int, default=8, help="stored frames per clip")
    p.add_argument("--frame-size", type=int, default=32, help="frame height/width in pixels")
    p.add_argument("--shapes", type=int, default=len(SHAPES), help="shape classes used")
    p.add_argument("--colors", type=int, default=len(COLORS), help="color classes used")
    p.add_argument("--motions", type=int, default=len(MOTIONS), help="motion patterns used")
    p.add_argument("--seed", type=int, default=0, help="generation seed")


def _run_gen(args) -> dict:
    if args.spec:
        if not Path(args.spec).is_file():
            raise ConfigError(f"--spec file not found: {args.spec}")
        try:
            doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except json.JSONDecodeError as err:
            raise ConfigError(f"--spec {args.spec}: invalid JSON ({err})") from err
        allowed = {f.name for f in dataclasses.fields(SyntheticDatasetSpec)}
        unknown = set(doc) - allowed
        if unknown:
            raise ConfigError(f"--spec {args.spec}: unknown keys {sorted(unknown)}")
        spec = SyntheticDatasetSpec(**doc)
    else:
        spec = SyntheticDatasetSpec(
            count=args.count, frame_size=args.frame_size, frames=args.frames,
            shapes=args.shapes, colors=args.colors, motions=args.motions,
            seed=_seed_from_env(args.seed),
        )
    out = generate_dataset(spec, args.out)
    return {"config": spec.to_dict(), "container": str(out), "count": spec.count}


def _add_train(sub):
    p = sub.add_parser(
        "train", help="run the two-stage schedule on a dataset container",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", help="RunConfig JSON file (defaults if omitted)")
    p.add_argument("--data", required=True, help="dataset container directory")
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")


def _run_train(args) -> dict:
    run = _load_run_config(args.config)
    seed = run.train.seed if args.seed is None else args.seed
    run = run.replace(seed=_seed_from_env(seed), data_dir=args.data, out_dir=args.out)
    samples = load_dataset(args.data)
    result = train(samples, run, out_dir=args.out)
    return {
        "config": run.replace(vocab_size=len(result.vocab)).to_dict(),
        "checkpoint": str(result.checkpoint_path),
        "epochs": len(result.logs),
        "final_loss": result.logs[-1]["loss"] if result.logs else None,
        "final_tau": result.logs[-1]["tau"] if result.logs else None,
    }


def _add_eval(sub):
    p = sub.add_parser(
        "eval", help="retrieval metrics for a trained checkpoint",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset container directory")
    p.add_argument("--frames", type=int, default=4, help="frames sampled per clip")
    p.add_argument("--batch-size", type=int, default=32, help="encoding batch size")


def _run_eval(args) -> dict:
    model, vocab, run = _load_model_from(args.ckpt)
    samples = load_dataset(args.data)
    reports = evaluate(model, vocab, samples, frames_eval=args.frames,
                       batch_size=args.batch_size)
    return {
        "config": run.to_dict(),
        "frames": args.frames,
        "pairs": len(samples),
        **reports,
    }


def _add_flops(sub):
    p = sub.add_parser(
        "flops", help="analytic parameter and FLOPs accounting",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--scale", choices=("desk", "paper"), default="paper",
                   help="configuration preset to count")
    p.add_argument("--mask-ratio", type=float, default=0.6,
                   help="video masking ratio in [0, 1)")
    p.add_argument("--frames", type=int, default=None,
                   help="frames per clip (preset default if omitted)")
    p.add_argument("--text-len", type=int, default=None,
                   help="text tokens (preset default if omitted)")


def _run_flops(args) -> dict:
    if not 0.0 <= args.mask_ratio < 1.0:
        raise ConfigError(f"--mask-ratio must be in [0, 1), got {args.mask_ratio}")
    cfg = paper_scale_config() if args.scale == "paper" else desk_config()
    report = report_for_mask_ratio(cfg, args.mask_ratio,
                                   frames=args.frames, text_len=args.text_len)
    return {
        "config": {**dataclasses.asdict(cfg), "scale": args.scale,
                   "mask_ratio": args.mask_ratio},
        **report.to_dict(),
    }


def _add_probe(sub):
    p = sub.add_parser(
        "probe", help="masked-view vs full-view similarity trends",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset container directory")
    p.add_argument("--trials", type=int, default=100, help="masked views per clip")
    p.add_argument("--mask-ratio", type=float, default=0.6, help="video masking ratio")
    p.add_argument("--text-mask-ratio", type=float, default=0.15, help="text masking ratio")
    p.add_argument("--frames", type=int, default=4, help="frames sampled per clip")
    p.add_argument("--limit", type=int, default=8, help="clips probed (0 = all)")
    p.add_argument("--seed", type=int, default=0, help="mask sampling seed")


def _run_probe(args) -> dict:
    model, vocab, run = _load_model_from(args.ckpt)
    samples = load_dataset(args.data)
    if args.limit:
        samples = samples[: args.limit]
    trend = similarity_probe(
        model, vocab, samples, trials=args.trials, rho_v=args.mask_ratio,
        rho_t=args.text_mask_ratio, seed=_seed_from_env(args.seed),
        frames_eval=args.frames,
    )
    return {"config": run.to_dict(), **trend}


_RUNNERS = {
    "gen": _run_gen,
    "train": _run_train,
    "eval": _run_eval,
    "flops": _run_flops,
    "probe": _run_probe,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="macvt",
        description="Masked contrastive video-text alignment at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen(sub)
    _add_train(sub)
    _add_eval(sub)
    _add_flops(sub)
    _add_probe(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _emit(_RUNNERS[args.command](args))
        return 0
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (DataFormatError, CheckpointError, MaskPlanError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
