"""
Shared state for ACT Lab subcommands.
Holds the resolved experiment config and output settings, and the data,
model and output plumbing every subcommand uses.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from ..core.models import Classifier
from ..core.records import MetricsRecord
from ..core.trainer import TrainPlan, TrainResult, train
from ..services.checkpoints import load_checkpoint, save_checkpoint
from ..services.datasets import Dataset, build_datasets
from ..services.metrics import write_metrics
from ..services.validation import ExperimentConfig

logger = logging.getLogger(__name__)


@dataclass
class NamedModel:
    """A model addressed by name, with the method and seed that produced it."""

    name: str
    model: Classifier
    method: str
    seed: Optional[int]


@dataclass
class RunContext:
    """Resolved settings of one command invocation."""

    config: ExperimentConfig
    out_dir: Path
    fmt: str
    eval_batch_size: int
    _datasets: Optional[tuple[Dataset, Dataset]] = field(default=None, repr=False)

    @property
    def checkpoint_dir(self) -> Path:
        return self.out_dir / "checkpoints"

    def datasets(self) -> tuple[Dataset, Dataset]:
        """The (train, test) pair, built once per invocation."""
        if self._datasets is None:
            self._datasets = build_datasets(self.config)
            train_set, test_set = self._datasets
            logger.info(f"Data: {len(train_set)} train / {len(test_set)} test examples")
        return self._datasets

    def write(self, name: str, records: Sequence[MetricsRecord]) -> Path:
        return write_metrics(records, self.out_dir / f"{name}_metrics.{self.fmt}", self.fmt)

    def train_and_save(self, plan: TrainPlan, seed: int) -> TrainResult:
        """Train one seed and checkpoint every model it produces."""
        train_set, test_set = self.datasets()
        result = train(plan, train_set, seed=seed, eval_dataset=test_set)
        for role, model in result.models.items():
            name = f"{plan.method}-{role}"
            meta = {
                "name": name,
                "method": plan.method,
                "role": role,
                "seed": seed,
                "epoch": plan.epochs,
                "alpha": plan.alpha if plan.method == "act" else None,
                "plan_digest": plan.digest(),
            }
            save_checkpoint(model, meta, self.checkpoint_dir / f"{name}_seed{seed}.ckpt")
        return result

    def models(self, checkpoints: Sequence[str]) -> list[NamedModel]:
        """
        Models named by checkpoint paths, or freshly trained ones.

        Without checkpoints the configured plan is trained for every seed and
        each resulting model (robust, plus natural for ACT) is returned.
        """
        if checkpoints:
            named = []
            for path in checkpoints:
                checkpoint = load_checkpoint(path)
                name = str(checkpoint.meta.get("name") or Path(path).stem)
                seed = checkpoint.meta.get("seed")
                named.append(
                    NamedModel(
                        name,
                        checkpoint.classifier(name),
                        str(checkpoint.meta.get("method", "")),
                        None if seed is None else int(seed),
                    )
                )
            return named

        plan = self.config.train_plan()
        named = []
        for seed in plan.seeds:
            result = self.train_and_save(plan, seed)
            for role, model in result.models.items():
                name = f"{plan.method}-{role}"
                named.append(
                    NamedModel(name, Classifier(model.spec, model.params, name), plan.method, seed)
                )
        return named
