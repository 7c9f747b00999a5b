"""
Main command-line entry point of the MTDnet engine.
"""
import argparse
import logging
import sys
from typing import List, Optional

from . import __version__
from .core.config import settings
from .routers import DOMAIN_ERRORS, StageFailure
from .routers import data, diagnostics, evaluation, training

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mtdnet",
        description="Multi-task deep metric learning for person re-identification",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=settings.log_level,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], type=str.upper)
    subparsers = parser.add_subparsers(dest="command", required=True)

    # Include command groups
    data.register(subparsers)
    training.register(subparsers)
    evaluation.register(subparsers)
    diagnostics.register(subparsers)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except StageFailure as e:
        print(f"error [{e.stage}]: {e}", file=sys.stderr)
        return 1
    except DOMAIN_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(cli_main())
