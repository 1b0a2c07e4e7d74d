"""
Experiment configuration for ACT Lab.
Parses and validates the flat key=value experiment documents and maps them
onto training plans, attack configurations and analysis settings.
"""

import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional, Union

from dotenv import dotenv_values

from ..core.attacks import AttackBudget, AttackConfig, AttackConfigError
from ..core.models import ModelSpec, ModelSpecError
from ..core.trainer import METHODS, PlanError, TrainPlan

logger = logging.getLogger(__name__)


class ValidationError(Exception):
    """Exception raised when an experiment configuration is invalid."""

    pass


# Value parsers. Each takes the raw string from the document.


def parse_str(raw: str) -> str:
    return raw.strip()


def parse_int(raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ValidationError(f"expected an integer, got '{raw}'")


def parse_optional_int(raw: str) -> Optional[int]:
    return None if not raw.strip() else parse_int(raw)


def parse_float(raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise ValidationError(f"expected a number, got '{raw}'")


def parse_bool(raw: str) -> bool:
    value = raw.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"expected true/false, got '{raw}'")


def parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(parse_int(part) for part in raw.split(",") if part.strip())


def parse_float_list(raw: str) -> tuple[float, ...]:
    return tuple(parse_float(part) for part in raw.split(",") if part.strip())


def parse_milestones(raw: str) -> tuple[tuple[int, float], ...]:
    """``60:0.2,120:0.2`` -> ((60, 0.2), (120, 0.2)); empty means no decay."""
    milestones = []
    for part in raw.split(","):
        if not part.strip():
            continue
        epoch, sep, factor = part.partition(":")
        if not sep:
            raise ValidationError(f"milestone '{part}' must look like EPOCH:FACTOR")
        milestones.append((parse_int(epoch), parse_float(factor)))
    return tuple(milestones)


def parse_means(raw: str) -> tuple[tuple[float, ...], ...]:
    """``0.3,0.47;0.7,0.53`` -> one mean vector per class."""
    return tuple(parse_float_list(block) for block in raw.split(";") if block.strip())


def parse_choice(*options: str) -> Callable[[str], str]:
    def parse(raw: str) -> str:
        value = raw.strip()
        if value not in options:
            raise ValidationError(f"expected one of {options}, got '{raw}'")
        return value

    return parse


def _key(default: Any, parse: Callable[[str], Any], doc: str, show: Optional[str] = None) -> Any:
    return field(default=default, metadata={"parse": parse, "doc": doc, "show": show})


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Every documented experiment key with its default.

    Documents only need to list the keys they change; an unknown key is an
    error.
    """

    # Training
    method: str = _key("act", parse_choice(*METHODS), "Training method")
    alpha: float = _key(0.9, parse_float, "ACT mixing weight between task and mimicry terms")
    alphas: tuple[float, ...] = _key(
        (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0),
        parse_float_list,
        "Mixing weights visited by sweep-alpha",
    )
    inv_lambda: float = _key(5.0, parse_float, "TRADES robustness weight 1/lambda")
    epochs: int = _key(200, parse_int, "Training epochs")
    batch_size: int = _key(128, parse_int, "Minibatch size")
    lr: float = _key(0.1, parse_float, "Initial learning rate")
    momentum: float = _key(0.9, parse_float, "SGD momentum")
    weight_decay: float = _key(0.0, parse_float, "L2 weight decay added to gradients")
    lr_milestones: tuple[tuple[int, float], ...] = _key(
        ((60, 0.2), (120, 0.2), (150, 0.2)),
        parse_milestones,
        "Learning-rate decay as EPOCH:FACTOR,...",
        show="60:0.2,120:0.2,150:0.2",
    )
    seeds: tuple[int, ...] = _key((0,), parse_int_list, "Training seeds")
    eval_every: int = _key(0, parse_int, "Periodic robust evaluation interval in epochs (0 = off)")
    augment_pad: int = _key(0, parse_int, "Reflect padding before random crops (images only)")
    augment_flip: bool = _key(False, parse_bool, "Random horizontal flips (images only)")

    # Model
    architecture: str = _key("mlp", parse_choice("mlp", "small_convnet"), "Model family")
    layer_widths: tuple[int, ...] = _key((2, 32, 32, 2), parse_int_list, "MLP widths, input to classes")
    input_shape: tuple[int, ...] = _key((1, 28, 28), parse_int_list, "ConvNet input as C,H,W")
    channels: tuple[int, ...] = _key((8, 16), parse_int_list, "ConvNet channels per stage")
    kernel_sizes: tuple[int, ...] = _key((3, 3), parse_int_list, "ConvNet kernel sizes per stage")
    dense_width: int = _key(64, parse_int, "ConvNet hidden dense width")
    num_classes: Optional[int] = _key(
        None, parse_optional_int, "Class count for the ConvNet and IDX data (default 10 / from labels)"
    )

    # Attacks
    clamp_min: float = _key(0.0, parse_float, "Lower pixel bound")
    clamp_max: float = _key(1.0, parse_float, "Upper pixel bound")
    train_epsilon: float = _key(0.031, parse_float, "Training attack radius")
    train_steps: int = _key(10, parse_int, "Training attack PGD steps")
    train_step_size: float = _key(0.007, parse_float, "Training attack step size")
    train_random_init: bool = _key(True, parse_bool, "Random start for the training attack")
    train_restarts: int = _key(1, parse_int, "Training attack restarts")
    eval_epsilon: float = _key(0.031, parse_float, "Evaluation attack radius")
    eval_steps: int = _key(20, parse_int, "Evaluation attack PGD steps")
    eval_step_size: float = _key(0.003, parse_float, "Evaluation attack step size")
    eval_random_init: bool = _key(True, parse_bool, "Random start for the evaluation attack")
    eval_restarts: int = _key(5, parse_int, "Evaluation attack restarts")
    attack_seed: int = _key(0, parse_int, "Seed of the evaluation attack random starts")

    # Data
    dataset: str = _key("gaussians", parse_choice("gaussians", "idx"), "Data source")
    data_seed: int = _key(0, parse_int, "Seed of the synthetic data")
    gaussian_n_per_class: int = _key(200, parse_int, "Training points per class")
    gaussian_test_n_per_class: int = _key(200, parse_int, "Test points per class")
    gaussian_means: tuple[tuple[float, ...], ...] = _key(
        ((0.3, 0.47), (0.7, 0.53)), parse_means, "Class means as x,y;x,y", show="0.3,0.47;0.7,0.53"
    )
    gaussian_sigma: tuple[float, ...] = _key(
        (0.1, 0.005), parse_float_list, "Standard deviation, shared or one per axis"
    )
    idx_train_images: str = _key("", parse_str, "IDX training images")
    idx_train_labels: str = _key("", parse_str, "IDX training labels")
    idx_test_images: str = _key("", parse_str, "IDX test images")
    idx_test_labels: str = _key("", parse_str, "IDX test labels")
    train_limit: Optional[int] = _key(None, parse_optional_int, "Use only the first N training examples")
    test_limit: Optional[int] = _key(None, parse_optional_int, "Use only the first N test examples")

    # Analysis
    pgd_steps: tuple[int, ...] = _key((20,), parse_int_list, "PGD step counts reported by evaluate")
    eps_list: tuple[float, ...] = _key(
        (0.0, 0.01, 0.02, 0.031, 0.05, 0.1, 0.2, 0.4),
        parse_float_list,
        "Radii visited by sweep-epsilon (ascending)",
    )
    sweep_steps: int = _key(20, parse_int, "PGD steps per sweep-epsilon radius")
    min_perturbation: bool = _key(True, parse_bool, "Report the mean minimum perturbation")
    min_perturbation_tol: float = _key(1e-3, parse_float, "Bisection tolerance")
    min_perturbation_hi: float = _key(0.5, parse_float, "Largest radius searched")
    attack_limit: int = _key(100, parse_int, "Examples attacked by the attack subcommand")
    probe_epochs: int = _key(0, parse_int, "Compression probe epochs (0 = off)")
    probe_widths: tuple[int, ...] = _key((400, 200), parse_int_list, "Compression probe hidden widths")
    probe_lr: float = _key(0.01, parse_float, "Compression probe learning rate")
    label_seed: int = _key(0, parse_int, "Seed of the random probe labels")
    transfer_base: str = _key(
        "clean_correct", parse_choice("clean_correct", "all"), "Transfer success denominator"
    )

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def describe(cls) -> str:
        """One documentation line per key: name, default and meaning."""
        lines = []
        for f in fields(cls):
            default = f.metadata["show"] or _render(f.default)
            lines.append(f"  {f.name:<26} {f.metadata['doc']} (default: {default})")
        return "\n".join(lines)

    @classmethod
    def from_mapping(
        cls, values: dict[str, Optional[str]], source: str = "<config>"
    ) -> "ExperimentConfig":
        """
        Build a config from raw string values, applying defaults only for absent keys.

        Raises:
            ValidationError: On unknown keys, unparsable values or inconsistent settings
        """
        schema = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(schema))
        if unknown:
            raise ValidationError(f"{source}: unknown keys {', '.join(unknown)}")

        parsed: dict[str, Any] = {}
        for key, raw in values.items():
            if raw is None:
                raise ValidationError(f"{source}: key '{key}' has no value")
            try:
                parsed[key] = schema[key].metadata["parse"](raw)
            except ValidationError as e:
                raise ValidationError(f"{source}: {key}: {e}")
        config = cls(**parsed)
        config.validate(source)
        return config

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "ExperimentConfig":
        """
        Load a key=value document.

        Raises:
            ValidationError: If the file is missing or invalid (the path is named)
        """
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f"Config file not found: {path}")
        try:
            values = dotenv_values(path)
        except (OSError, UnicodeDecodeError) as e:
            logger.error(f"Failed to read config {path}: {e}")
            raise ValidationError(f"Cannot read config {path}: {e}")
        logger.info(f"Loaded experiment config {path} ({len(values)} keys)")
        return cls.from_mapping(dict(values), str(path))

    def with_overrides(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with typed overrides (from command-line flags), revalidated."""
        config = replace(self, **overrides)
        config.validate("<overrides>")
        return config

    def validate(self, source: str = "<config>") -> None:
        try:
            self.train_plan()
            self.evaluation_attack()
        except (PlanError, ModelSpecError, AttackConfigError) as e:
            raise ValidationError(f"{source}: {e}")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValidationError(f"{source}: alphas must lie in [0, 1]")
        if any(b < a for a, b in zip(self.eps_list, self.eps_list[1:])):
            raise ValidationError(f"{source}: eps_list must be sorted ascending")
        if self.sweep_steps < 1 or any(k < 0 for k in self.pgd_steps):
            raise ValidationError(f"{source}: sweep_steps must be >= 1 and pgd_steps >= 0")
        if self.attack_limit < 1:
            raise ValidationError(f"{source}: attack_limit must be >= 1")
        if self.min_perturbation_tol <= 0 or self.min_perturbation_hi <= 0:
            raise ValidationError(f"{source}: minimum-perturbation tol and hi must be > 0")
        if self.probe_epochs < 0 or len(self.probe_widths) != 2:
            raise ValidationError(f"{source}: probe needs probe_epochs >= 0 and two widths")

    def model_spec(self) -> ModelSpec:
        if self.architecture == "mlp":
            return ModelSpec.mlp(self.layer_widths)
        return ModelSpec.small_convnet(
            self.input_shape,
            self.channels,
            self.kernel_sizes,
            self.dense_width,
            self.num_classes or 10,
        )

    def _budget(self, epsilon: float) -> AttackBudget:
        return AttackBudget(epsilon, (self.clamp_min, self.clamp_max))

    def training_attack(self) -> AttackConfig:
        return AttackConfig(
            self._budget(self.train_epsilon),
            steps=self.train_steps,
            step_size=self.train_step_size,
            random_init=self.train_random_init,
            restarts=self.train_restarts,
        )

    def evaluation_attack(self) -> AttackConfig:
        return AttackConfig(
            self._budget(self.eval_epsilon),
            steps=self.eval_steps,
            step_size=self.eval_step_size,
            random_init=self.eval_random_init,
            restarts=self.eval_restarts,
            seed=self.attack_seed,
        )

    def train_plan(self) -> TrainPlan:
        return TrainPlan(
            method=self.method,
            model=self.model_spec(),
            alpha=self.alpha,
            inv_lambda=self.inv_lambda,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            lr_milestones=self.lr_milestones,
            attack=self.training_attack(),
            seeds=self.seeds,
            dataset=self.dataset,
            augment_pad=self.augment_pad,
            augment_flip=self.augment_flip,
            eval_every=self.eval_every,
            eval_attack=self.evaluation_attack(),
        )


def _render(value: Any) -> str:
    if value is None:
        return "unset"
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value) if value != "" else "empty"
