"""Command line entry point.

    extract features  --dataset-root R --dataset-kind mvtec_ad --out O
    extract masks     ... same arguments ...
    extract text      ...
    extract manifests ... [--shots K]

Each subcommand covers one extraction stage; run features before manifests
(masks and text are optional stages, manifests references their output when
present). Exit codes: 0 success, 1 validation failure (arguments, config,
dataset layout), 2 runtime failure.
"""

import argparse
import sys
from pathlib import Path

from .config import BridgeConfig, BridgeConfigError
from .datasets import DATASET_KINDS, DatasetError
from .encoders import BridgeDependencyError
from .extract import (ExtractionError, ExtractionJob, build_manifests,
                      extract_candidate_masks, extract_features, extract_text)

VALIDATION_ERRORS = (BridgeConfigError, DatasetError, ValueError)


def _add_common(p):
    p.add_argument("--dataset-root", required=True,
                   help="dataset directory in the documented layout")
    p.add_argument("--dataset-kind", required=True,
                   choices=sorted(DATASET_KINDS),
                   help="which directory layout to expect")
    p.add_argument("--out", required=True, help="output root directory")
    p.add_argument("--config", default=None,
                   help="bridge config JSON (defaults apply when omitted)")
    p.add_argument("--categories", default=None,
                   help="comma-separated category filter")
    p.add_argument("--shots", type=int, default=1,
                   help="reference images per category (default 1)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed")
    p.add_argument("--threads", type=int, default=None,
                   help="override the config thread count")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="extract",
        description="produce engine input tensors and manifests from images")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, doc in (
            ("features", _cmd_features,
             "image, per-level, and clustering feature tensors"),
            ("masks", _cmd_masks, "candidate component mask stacks"),
            ("text", _cmd_text, "prompt-set text feature pairs"),
            ("manifests", _cmd_manifests,
             "sample manifests plus the k-shot bank manifest")):
        p = sub.add_parser(name, help=doc)
        _add_common(p)
        p.set_defaults(func=fn)
    return parser


def _job_from_args(args):
    config = (BridgeConfig.from_path(args.config) if args.config
              else BridgeConfig())
    if args.seed is not None:
        config = config.override(seed=args.seed)
    if args.threads is not None:
        config = config.override(threads=args.threads)
    categories = None
    if args.categories:
        categories = tuple(c.strip() for c in args.categories.split(",")
                           if c.strip())
    if args.shots < 1:
        raise BridgeConfigError("--shots must be >= 1")
    return ExtractionJob(dataset_root=Path(args.dataset_root),
                         dataset_kind=args.dataset_kind,
                         output_root=Path(args.out),
                         config=config,
                         categories=categories,
                         shots=args.shots)


def _cmd_features(args):
    summary = extract_features(_job_from_args(args))
    for cat, n in sorted(summary.items()):
        print(f"{cat}: features for {n} image(s)")
    return 0


def _cmd_masks(args):
    summary = extract_candidate_masks(_job_from_args(args))
    for cat, n in sorted(summary.items()):
        print(f"{cat}: candidate masks for {n} image(s)")
    return 0


def _cmd_text(args):
    summary = extract_text(_job_from_args(args))
    for cat, channels in sorted(summary.items()):
        print(f"{cat}: text features ({channels} channels)")
    return 0


def _cmd_manifests(args):
    summary = build_manifests(_job_from_args(args))
    for cat, counts in sorted(summary.items()):
        print(f"{cat}: bank of {counts['references']}, "
              f"{counts['queries']} query manifest(s)")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on bad usage; bad arguments are validation
        # failures under this tool's exit-code contract (--help stays 0)
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except VALIDATION_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ExtractionError, BridgeDependencyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception:
        import traceback
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
