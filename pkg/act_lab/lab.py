"""
Command-line front end for ACT Lab.
Parses arguments, resolves the experiment configuration and routes to the
subcommand handlers.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import NoReturn, Optional, Sequence

from .config import config, setup_logging, validate_environment
from .core.analysis import AnalysisError
from .core.attacks import AttackConfigError
from .core.models import ModelSpecError
from .core.objectives import LabelError
from .core.tensor import NumericalError, ShapeError
from .core.trainer import TrainingError
from .handlers.context import RunContext
from .handlers.eval_commands import register_eval_commands
from .handlers.train_commands import register_train_commands
from .services.checkpoints import CheckpointError
from .services.datasets import DatasetError
from .services.metrics import FORMATS, MetricsError
from .services.validation import ExperimentConfig, ValidationError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

# Failures caused by inputs rather than by how the command was typed
DATA_ERRORS = (
    ValidationError,
    DatasetError,
    CheckpointError,
    MetricsError,
    TrainingError,
    AnalysisError,
    ModelSpecError,
    ShapeError,
    LabelError,
    AttackConfigError,
    NumericalError,
    OSError,
)


class UsageError(Exception):
    """Exception raised for unknown subcommands, unknown flags or bad flag values."""

    pass


class LabArgumentParser(argparse.ArgumentParser):
    """Argument parser that raises instead of exiting on usage errors."""

    def error(self, message: str) -> NoReturn:
        raise UsageError(f"{message}\n\n{self.format_help()}")


class ActLab:
    """Main application class: builds the parser and dispatches subcommands."""

    def __init__(self) -> None:
        self.parser = self._build_parser()

    def _build_parser(self) -> LabArgumentParser:
        common = LabArgumentParser(add_help=False)
        common.add_argument("--config", metavar="PATH", help="Experiment key=value file")
        common.add_argument("--seed", type=int, metavar="N", help="Run with this single seed")
        common.add_argument(
            "--out", metavar="DIR", help=f"Output directory (default: {config.OUTPUT_DIR})"
        )
        common.add_argument(
            "--format",
            choices=FORMATS,
            help=f"Metrics file format (default: {config.DEFAULT_FORMAT})",
        )

        parser = LabArgumentParser(
            prog="act",
            description="Adversarial concurrent training experiments.",
            epilog="Experiment keys:\n" + ExperimentConfig.describe(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
        subparsers.required = True
        self._register_handlers(subparsers, common)
        return parser

    def _register_handlers(
        self, subparsers: argparse._SubParsersAction, common: LabArgumentParser
    ) -> None:
        """Register every subcommand."""
        self.train_handler = register_train_commands(subparsers, common)
        self.eval_handler = register_eval_commands(subparsers, common)
        logger.debug("Registered subcommands")

    def resolve(self, args: argparse.Namespace) -> RunContext:
        """
        Merge the config document, command-line flags and environment defaults.

        Raises:
            ValidationError: If the config file is missing or invalid
        """
        if args.config:
            experiment = ExperimentConfig.from_file(args.config)
        else:
            experiment = ExperimentConfig().with_overrides(seeds=(config.DEFAULT_SEED,))
        if args.seed is not None:
            experiment = experiment.with_overrides(seeds=(args.seed,))

        return RunContext(
            config=experiment,
            out_dir=Path(args.out or config.OUTPUT_DIR),
            fmt=args.format or config.DEFAULT_FORMAT,
            eval_batch_size=config.EVAL_BATCH_SIZE,
        )

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Run one command.

        Args:
            argv: Arguments without the program name (defaults to sys.argv[1:])

        Returns:
            0 on success, 1 on a usage error, 2 on a data or configuration error
        """
        try:
            args = self.parser.parse_args(argv)
        except UsageError as e:
            print(f"usage error: {e}", file=sys.stderr)
            return EXIT_USAGE
        except SystemExit as e:
            # --help
            return int(e.code or 0)

        try:
            ctx = self.resolve(args)
            logger.info(f"Running '{args.command}' with output in {ctx.out_dir}")
            return args.handler(args, ctx)
        except DATA_ERRORS as e:
            logger.error(f"{args.command} failed: {e}")
            print(f"error: {e}", file=sys.stderr)
            return EXIT_DATA


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main application entry point."""
    setup_logging()

    if not validate_environment():
        logger.error("Environment validation failed. Exiting.")
        return EXIT_DATA

    try:
        return ActLab().run(argv)
    except KeyboardInterrupt:
        logger.info("Received keyboard interrupt. Shutting down...")
        return 130
