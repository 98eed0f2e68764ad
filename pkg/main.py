#!/usr/bin/env python3
"""
Main entry point for tbgdiff
Training, evaluation, inference, synthetic data and profiling from one script
"""

import argparse
import json
import sys
from pathlib import Path

# Add project root to Python path
PROJECT_ROOT = Path(__file__).parent
sys.path.append(str(PROJECT_ROOT))

# Import after path setup
from config.settings import list_override_keys, load_config  # noqa: E402
from src.ingestion.dataset_loader import VideoDatasetLoader, load_dataset  # noqa: E402
from src.ingestion.synthetic import write_synthetic_dataset  # noqa: E402
from src.orchestration.checkpoint import load_checkpoint  # noqa: E402
from src.orchestration.evaluator import (  # noqa: E402
    config_from_checkpoint,
    evaluate,
    infer,
    profile_model,
)
from src.orchestration.trainer import train  # noqa: E402
from src.utils import setup_logging  # noqa: E402
from src.utils.exceptions import ConfigurationError, TBGDiffError  # noqa: E402


def _parse_size(value: str):
    try:
        height, width = (int(v) for v in value.lower().split("x"))
    except ValueError as e:
        raise ConfigurationError(f"--size must look like HxW, got '{value}'") from e
    return height, width


def _config(args, extra=()):
    return load_config(args.config, list(args.override or []) + list(extra))


def _checkpoint_config(args, extra=()):
    """The checkpoint's own config unless --config is given, overrides on top"""
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    if args.config is None and checkpoint is not None:
        overrides = list(args.override or []) + list(extra)
        return config_from_checkpoint(checkpoint, overrides), checkpoint
    return _config(args, extra), checkpoint


def cmd_train(args) -> None:
    config = _config(args)
    print(f"🚀 Training into {config.output_dir}")
    checkpoint = train(config, resume_from=args.resume)
    last = checkpoint.history[-1] if checkpoint.history else None
    print(f"✅ Finished at step {checkpoint.step}")
    if last:
        print(f"   final loss {last['loss']:.5f}")


def cmd_eval(args) -> None:
    extra = [f"output_dir={args.out}"] if args.out else []
    config, checkpoint = _checkpoint_config(args, extra)
    size = (config.resolution, config.resolution)
    videos = list(load_dataset(args.data, size if config.data.resize else None))
    report = evaluate(config, checkpoint, videos, output_dir=config.output_dir)
    print(report.to_dataframe().to_string(index=False))
    print(f"✅ Metrics written to {Path(config.output_dir) / 'metrics.csv'}")


def cmd_infer(args) -> None:
    config, checkpoint = _checkpoint_config(args)
    written = infer(config, checkpoint, args.frames, args.out)
    print(f"✅ Wrote {len(written)} masks to {args.out}")


def cmd_synth(args) -> None:
    out = write_synthetic_dataset(
        args.out, args.videos, args.frames, _parse_size(args.size), args.seed
    )
    print(f"✅ Synthetic dataset written to {out}")


def cmd_profile(args) -> None:
    config, checkpoint = _checkpoint_config(args)
    report = profile_model(config, checkpoint, repeats=args.repeats)
    print("📊 Parameters per module:")
    for name, count in report["parameters"].items():
        print(f"   {name:<18} {count:>10,}")
    print(f"   {'total':<18} {report['total_parameters']:>10,}")
    print(f"   size {report['size_mb']:.2f} MB, {report['fps']:.2f} frames/s")


def cmd_info(args) -> None:
    info = VideoDatasetLoader().get_dataset_info(args.data)
    print(json.dumps(info, indent=2))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tbgdiff",
        description="tbgdiff - video shadow detection with boundary-guided mask diffusion",
    )
    parser.add_argument("--log-level", default=None, help="Override TBGDIFF_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command")

    def with_config(p):
        p.add_argument(
            "--config",
            help="YAML config file (eval, infer and profile default to the checkpoint's config)",
        )
        p.add_argument(
            "--override",
            action="append",
            metavar="KEY=VALUE",
            help="Override a config key (repeatable); keys: "
            + ", ".join(list_override_keys()),
        )

    p = sub.add_parser("train", help="Train a model")
    with_config(p)
    p.add_argument("--resume", help="Checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="Evaluate a checkpoint on a dataset directory")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="Dataset root")
    p.add_argument("--out", help="Output directory (default: output_dir of the config)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="Predict masks for a directory of frames")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("synth", help="Write a synthetic moving-shadow dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--videos", type=int, default=8)
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--size", default="64x64", help="HxW")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("profile", help="Parameter counts and sampling speed")
    with_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--repeats", type=int, default=1)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("info", help="Summarize a dataset directory")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv=None) -> int:
    """Main function with argument parsing"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 0

    setup_logging("src", level=args.log_level)
    try:
        args.func(args)
    except TBGDiffError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("\n👋 Interrupted")
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
