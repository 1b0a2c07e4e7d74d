"""
Evaluation subcommands for ACT Lab: evaluate, attack, analyze,
sweep-epsilon and transfer.
"""

import argparse
import io
import logging
from collections import Counter
from pathlib import Path

import numpy as np

from ..core.analysis import (
    compression_probe,
    entropy_report,
    epsilon_sweep,
    evaluate_model,
    mean_min_perturbation,
    sweep_step_size,
    transfer_matrix,
)
from ..core.attacks import multi_restart_attack
from ..core.models import Classifier, frobenius_norms
from ..core.records import MetricsRecord
from ..services.integrity import atomic_write_bytes
from ..services.metrics import render_table
from .context import NamedModel, RunContext

logger = logging.getLogger(__name__)


def _save_array(path: Path, array: np.ndarray) -> None:
    buffer = io.BytesIO()
    np.save(buffer, array, allow_pickle=False)
    atomic_write_bytes(path, buffer.getvalue())


def _labels(named: list[NamedModel]) -> list[str]:
    """Model names, qualified by seed where a name repeats."""
    counts = Counter(nm.name for nm in named)
    return [nm.name if counts[nm.name] == 1 else f"{nm.name}@seed{nm.seed}" for nm in named]


class EvalCommands:
    """Handler class for subcommands that measure trained models."""

    def evaluate_command(self, args: argparse.Namespace, ctx: RunContext) -> int:
        """
        Report clean accuracy, robust accuracy per PGD step count, mean minimum
        perturbation, weight norms and posterior entropy on the test split.
        """
        config = ctx.config
        named = ctx.models(args.checkpoint)
        _, test_set = ctx.datasets()
        cfg = config.evaluation_attack()

        records: list[MetricsRecord] = []
        for nm in named:
            report = evaluate_model(
                nm.model,
                test_set,
                cfg,
                pgd_steps=config.pgd_steps,
                min_perturbation_tol=config.min_perturbation_tol if config.min_perturbation else None,
                min_perturbation_hi=config.min_perturbation_hi,
                batch_size=ctx.eval_batch_size,
            )
            records.extend(report.to_records(nm.method, nm.seed))

        path = ctx.write("evaluate", records)
        print(render_table(records), end="")
        print(f"evaluate: {len(named)} model(s) -> {path}")
        return 0

    def attack_command(self, args: argparse.Namespace, ctx: RunContext) -> int:
        """
        Attack the first ``attack_limit`` test examples, save the adversarial
        batch and perturbations as .npy arrays, and record each example's
        minimum successful radius.
        """
        config = ctx.config
        named = ctx.models(args.checkpoint)
        _, test_set = ctx.datasets()
        subset = test_set.take(config.attack_limit)
        cfg = config.evaluation_attack()
        attack_dir = ctx.out_dir / "attack"

        records: list[MetricsRecord] = []
        for nm, label in zip(named, _labels(named)):
            frozen = nm.model.frozen()
            result = multi_restart_attack(frozen.logits, subset.inputs, subset.labels, cfg)
            stem = label.replace("@", "_")
            _save_array(attack_dir / f"{stem}_x_adv.npy", result.x_adv)
            _save_array(attack_dir / f"{stem}_delta.npy", result.delta)

            _, _, radii = mean_min_perturbation(
                nm.model,
                subset,
                cfg,
                config.min_perturbation_tol,
                config.min_perturbation_hi,
                ctx.eval_batch_size,
            )
            base = dict(kind="attack", method=nm.method, model=label, seed=nm.seed)
            for i, (flipped, radius) in enumerate(zip(result.flipped, radii)):
                records.append(
                    MetricsRecord(
                        metric="flipped",
                        value=float(flipped),
                        epsilon=cfg.epsilon,
                        steps=cfg.steps,
                        step_size=cfg.step_size,
                        restarts=cfg.restarts,
                        tag=str(i),
                        **base,
                    )
                )
                records.append(
                    MetricsRecord(
                        metric="min_perturbation",
                        value=float(radius),
                        steps=cfg.steps,
                        restarts=cfg.restarts,
                        tag=str(i),
                        **base,
                    )
                )
            logger.info(f"{label}: {int(result.flipped.sum())}/{len(subset)} examples flipped")

        path = ctx.write("attack", records)
        print(f"attack: {len(named)} model(s), {len(subset)} example(s) -> {path}, {attack_dir}")
        return 0

    def analyze_command(self, args: argparse.Namespace, ctx: RunContext) -> int:
        """Weight norms, posterior entropy over the training split, and the optional probe."""
        config = ctx.config
        named = ctx.models(args.checkpoint)
        train_set, _ = ctx.datasets()

        records: list[MetricsRecord] = []
        for nm in named:
            base = dict(kind="analyze", method=nm.method, model=nm.name, seed=nm.seed)
            for layer, norm in frobenius_norms(nm.model.params):
                records.append(MetricsRecord(metric="frobenius_norm", value=norm, tag=layer, **base))
            entropy = entropy_report(nm.model, train_set, ctx.eval_batch_size)
            records.append(MetricsRecord(metric="posterior_entropy", value=entropy, **base))
            if config.probe_epochs > 0:
                curve = compression_probe(
                    nm.model,
                    train_set,
                    config.label_seed,
                    config.probe_widths,
                    config.probe_epochs,
                    config.probe_lr,
                    ctx.eval_batch_size,
                )
                for epoch, value in enumerate(curve):
                    records.append(
                        MetricsRecord(metric="probe_accuracy", value=value, **{**base, "epoch": epoch})
                    )

        path = ctx.write("analyze", records)
        print(render_table(records), end="")
        print(f"analyze: {len(named)} model(s) -> {path}")
        return 0

    def sweep_epsilon_command(self, args: argparse.Namespace, ctx: RunContext) -> int:
        """Robust accuracy over the configured radii with step size 2.5 * eps / K."""
        config = ctx.config
        named = ctx.models(args.checkpoint)
        _, test_set = ctx.datasets()
        cfg = config.evaluation_attack()

        records: list[MetricsRecord] = []
        for nm in named:
            curve = epsilon_sweep(
                nm.model, test_set, config.eps_list, config.sweep_steps, cfg, ctx.eval_batch_size
            )
            for eps, accuracy in curve:
                records.append(
                    MetricsRecord(
                        kind="sweep_epsilon",
                        method=nm.method,
                        model=nm.name,
                        seed=nm.seed,
                        metric="robust_accuracy",
                        value=accuracy,
                        epsilon=eps,
                        steps=config.sweep_steps,
                        step_size=sweep_step_size(eps, config.sweep_steps, cfg.step_size),
                        restarts=cfg.restarts,
                    )
                )

        path = ctx.write("sweep_epsilon", records)
        print(render_table(records), end="")
        print(f"sweep-epsilon: {len(config.eps_list)} radii -> {path}")
        return 0

    def transfer_command(self, args: argparse.Namespace, ctx: RunContext) -> int:
        """Success rate of every surrogate's perturbations against every target."""
        config = ctx.config
        named = ctx.models(args.checkpoint)
        _, test_set = ctx.datasets()
        cfg = config.evaluation_attack()
        labels = _labels(named)
        models = [Classifier(nm.model.spec, nm.model.params, label) for nm, label in zip(named, labels)]

        cells = transfer_matrix(models, test_set, cfg, ctx.eval_batch_size, config.transfer_base)
        records: list[MetricsRecord] = []
        for cell in cells:
            base = dict(
                kind="transfer",
                model=cell.target,
                epsilon=cfg.epsilon,
                steps=cfg.steps,
                step_size=cfg.step_size,
                restarts=cfg.restarts,
                tag=f"{cell.surrogate}->{cell.target}",
            )
            records.append(MetricsRecord(metric="success_rate", value=cell.success_rate, **base))
            records.append(MetricsRecord(metric="count", value=float(cell.count), **base))

        path = ctx.write("transfer", records)
        print(render_table(records), end="")
        print(f"transfer: {len(models)}x{len(models)} matrix -> {path}")
        return 0


def register_eval_commands(
    subparsers: argparse._SubParsersAction, common: argparse.ArgumentParser
) -> EvalCommands:
    """
    Register evaluation subcommands.

    Each accepts ``--checkpoint PATH`` (repeatable); without one the
    configured plan is trained first.

    Args:
        subparsers: Subcommand registry of the top-level parser
        common: Parent parser carrying the shared flags

    Returns:
        EvalCommands instance
    """
    handler = EvalCommands()
    commands = [
        ("evaluate", handler.evaluate_command, "Clean/robust accuracy and model statistics"),
        ("attack", handler.attack_command, "Adversarial batches and per-example minimum perturbations"),
        ("analyze", handler.analyze_command, "Weight norms, posterior entropy and compression probe"),
        ("sweep-epsilon", handler.sweep_epsilon_command, "Robust accuracy across attack radii"),
        ("transfer", handler.transfer_command, "Surrogate-to-target attack success matrix"),
    ]
    for name, command, help_text in commands:
        parser = subparsers.add_parser(name, parents=[common], help=help_text)
        parser.add_argument(
            "--checkpoint",
            action="append",
            default=[],
            metavar="PATH",
            help="Checkpoint to load (repeatable)",
        )
        parser.set_defaults(handler=command)

    logger.debug("Evaluation commands registered")
    return handler
