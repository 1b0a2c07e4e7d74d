"""
Training subcommands for ACT Lab: train and sweep-alpha.
"""

import argparse
import logging

from ..core.analysis import sweep_alpha
from ..core.records import MetricsRecord
from .context import RunContext

logger = logging.getLogger(__name__)


class TrainCommands:
    """Handler class for subcommands that train models."""

    def train_command(self, args: argparse.Namespace, ctx: RunContext) -> int:
        """
        Train the configured plan for every seed and checkpoint the models.

        Args:
            args: Parsed command-line arguments
            ctx: Resolved run settings

        Returns:
            Exit status
        """
        plan = ctx.config.train_plan()
        records: list[MetricsRecord] = []
        for seed in plan.seeds:
            result = ctx.train_and_save(plan, seed)
            records.extend(result.records)

        path = ctx.write("train", records)
        print(f"train: {plan.method} x {len(plan.seeds)} seed(s) -> {path}")
        print(f"checkpoints: {ctx.checkpoint_dir}")
        return 0

    def sweep_alpha_command(self, args: argparse.Namespace, ctx: RunContext) -> int:
        """
        Train ACT over the configured alpha list and report both models.

        Emits one row per (alpha, seed, model, metric) plus mean/std rows.
        """
        train_set, test_set = ctx.datasets()
        plan = ctx.config.train_plan()
        records = sweep_alpha(
            plan,
            train_set,
            test_set,
            ctx.config.alphas,
            ctx.config.evaluation_attack(),
            plan.seeds,
            ctx.eval_batch_size,
        )
        path = ctx.write("sweep_alpha", records)
        print(f"sweep-alpha: {len(ctx.config.alphas)} alpha value(s) -> {path}")
        return 0


def register_train_commands(
    subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser
) -> TrainCommands:
    """
    Register training subcommands.

    Args:
        subparsers: Subcommand registry of the top-level parser
        common: Parent parser carrying the shared flags

    Returns:
        TrainCommands instance
    """
    handler = TrainCommands()

    train_parser = subparsers.add_parser(
        "train", parents=[common], help="Train the configured method and save checkpoints"
    )
    train_parser.set_defaults(handler=handler.train_command)

    sweep_parser = subparsers.add_parser(
        "sweep-alpha", parents=[common], help="Train ACT over the alpha list and compare both models"
    )
    sweep_parser.set_defaults(handler=handler.sweep_alpha_command)

    logger.debug("Training commands registered")
    return handler
