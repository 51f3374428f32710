"""Command-line entry point for the audio bag-of-codewords pipeline."""

import argparse
import json
import logging
import sys
from typing import Any, Optional, Sequence

from .artifact_store import ArtifactStore
from .config_manager import RunConfig, get_config, load_run_config
from .exceptions import AudioBowError
from .fixture import make_synthetic_fixture
from .manifest import ingest
from .pipeline import STAGES, run_stage
from .sweep import sweep


logger = logging.getLogger(__name__)

# Options that map one-to-one onto RunConfig fields
RUN_FIELDS = (
    "manifest_path",
    "vocabulary_path",
    "seed",
    "compression_factor",
    "codebook_size",
    "head_width",
    "head_dropout",
    "mask_p",
    "workers",
    "head_artifact",
    "allow_overrides",
)


def add_run_options(parser: argparse.ArgumentParser) -> None:
    """Options shared by every stage command; they mirror RunConfig fields."""
    parser.add_argument("--config", dest="config_path", help="JSON run config.")
    parser.add_argument("--manifest", dest="manifest_path", help="Manifest CSV.")
    parser.add_argument(
        "--vocabulary", dest="vocabulary_path", help="Class vocabulary CSV (index,name)."
    )
    parser.add_argument("--store", dest="store_dir", help="Artifact store directory.")
    parser.add_argument("--seed", type=int, help="Run seed.")
    parser.add_argument(
        "--compression", dest="compression_factor", type=int, help="Compression factor F."
    )
    parser.add_argument("--codebook-size", type=int, help="Codebook size D.")
    parser.add_argument("--head-width", type=int, help="Hidden width of the head.")
    parser.add_argument("--head-dropout", type=float, help="Dropout of the head.")
    parser.add_argument("--mask-p", type=float, help="Input code masking probability.")
    parser.add_argument("--workers", type=int, help="Worker threads for decoding.")
    parser.add_argument("--head-artifact", help="Evaluate this stored head (by hash) instead.")
    parser.add_argument(
        "--allow-overrides",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="Accept values outside the declared grids.",
    )


def _build(args: argparse.Namespace) -> tuple[RunConfig, ArtifactStore]:
    settings = get_config()
    config = load_run_config(args.config_path)
    flags = {name: getattr(args, name) for name in RUN_FIELDS}
    if flags["workers"] is None and args.config_path is None:
        flags["workers"] = settings.workers
    config = config.with_overrides(**flags)
    return config, ArtifactStore(args.store_dir or settings.store_dir)


def _ingest(args: argparse.Namespace) -> None:
    dataset = ingest(args.manifest, args.vocabulary_path)
    print(json.dumps(dataset.summary(), indent=2, sort_keys=True))


def _stage(args: argparse.Namespace) -> None:
    config, store = _build(args)
    report = run_stage(args.command, config, store)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def _sweep(args: argparse.Namespace) -> None:
    config, store = _build(args)
    frame = sweep(config, store, out_dir=args.out_dir)
    print(frame.to_string(index=False))


def _fixture(args: argparse.Namespace) -> None:
    manifest_path = make_synthetic_fixture(
        args.out_dir, seed=args.seed, n_clips=args.clips, n_classes=args.classes
    )
    print(manifest_path)


def build_parser() -> argparse.ArgumentParser:
    """The ``audio-bow`` argument parser with one subcommand per action."""
    parser = argparse.ArgumentParser(
        prog="audio-bow", description="Attention-free audio tagging with autoencoder codebooks."
    )
    parser.add_argument("--log-level", default=None, help="Override the configured log level.")
    commands = parser.add_subparsers(dest="command", required=True)

    ingest_parser = commands.add_parser(
        "ingest", help="Validate a manifest and print per-split and per-class counts."
    )
    ingest_parser.add_argument("manifest")
    ingest_parser.add_argument("--vocabulary", dest="vocabulary_path", help="Class vocabulary CSV.")
    ingest_parser.set_defaults(handler=_ingest)

    for stage in STAGES:
        stage_parser = commands.add_parser(stage, help=f"Run the {stage} stage.")
        add_run_options(stage_parser)
        stage_parser.set_defaults(handler=_stage)

    sweep_parser = commands.add_parser(
        "sweep", help="Run the configured (F, D, width, dropout, mask_p) grid."
    )
    add_run_options(sweep_parser)
    sweep_parser.add_argument("--out", dest="out_dir", help="Directory for the table and plots.")
    sweep_parser.set_defaults(handler=_sweep)

    fixture_parser = commands.add_parser("fixture", help="Write the synthetic dataset.")
    fixture_parser.add_argument("out_dir")
    fixture_parser.add_argument("--seed", type=int, default=0)
    fixture_parser.add_argument("--clips", type=int, default=600)
    fixture_parser.add_argument("--classes", type=int, default=8)
    fixture_parser.set_defaults(handler=_fixture)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Main entry point.

    Returns:
        Exit code: 0 success, 2 validation, 3 missing artifact, 4 divergence
    """
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 after --help
        return e.code if isinstance(e.code, int) else 2

    handler: Any = args.handler
    try:
        get_config().setup_logging(args.log_level)
        handler(args)
        return 0

    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        return 1

    except AudioBowError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code

    except OSError as e:
        logger.error("OS error: %s", str(e), exc_info=True)
        return 1

    except Exception as e:  # pylint: disable=broad-except
        logger.error("Fatal error: %s", str(e), exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
