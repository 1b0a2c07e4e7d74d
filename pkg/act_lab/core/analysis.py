"""
Evaluation battery for ACT Lab.
Clean and robust accuracy, white-box and transfer attack success, epsilon
sweeps, minimum perturbations, weight norms, posterior entropy and the
random-label compression probe.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional, Sequence

import numpy as np

from ..services.datasets import Dataset
from .attacks import AttackConfig, min_perturbation, multi_restart_attack
from .models import Classifier, ModelSpec, features, frobenius_norms
from .objectives import posterior_entropy
from .records import MetricsRecord
from .trainer import Batch, TrainPlan, new_learner, standard_step, train

logger = logging.getLogger(__name__)

# Rate denominators for transfer success
CLEAN_CORRECT = "clean_correct"
ALL_EXAMPLES = "all"


class AnalysisError(Exception):
    """Exception raised for evaluations that cannot be computed."""

    pass


@dataclass
class TransferCell:
    """Attack success of perturbations crafted on ``surrogate`` against ``target``."""

    surrogate: str
    target: str
    success_rate: float
    count: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.success_rate <= 1.0:
            raise AnalysisError(f"success rate out of range: {self.success_rate}")


@dataclass
class EvalReport:
    """
    Everything measured about one model.

    ``robust_accuracy`` is keyed by (steps, restarts, epsilon).
    """

    model: str
    clean_accuracy: float
    robust_accuracy: dict[tuple[int, int, float], float] = field(default_factory=dict)
    mean_min_perturbation: Optional[float] = None
    unbounded_count: int = 0
    frobenius: list[tuple[str, float]] = field(default_factory=list)
    entropy: Optional[float] = None
    probe_curve: list[float] = field(default_factory=list)

    def to_records(self, method: str = "", seed: Optional[int] = None) -> list[MetricsRecord]:
        """Flatten the report into metrics rows, one per measured quantity."""
        base = dict(kind="eval", method=method, model=self.model, seed=seed)
        rows = [MetricsRecord(metric="clean_accuracy", value=self.clean_accuracy, **base)]
        for (steps, restarts, eps), value in sorted(self.robust_accuracy.items()):
            rows.append(
                MetricsRecord(
                    metric="robust_accuracy",
                    value=value,
                    epsilon=eps,
                    steps=steps,
                    restarts=restarts,
                    **base,
                )
            )
        if self.mean_min_perturbation is not None:
            rows.append(
                MetricsRecord(metric="mean_min_perturbation", value=self.mean_min_perturbation, **base)
            )
            rows.append(
                MetricsRecord(metric="unbounded_count", value=float(self.unbounded_count), **base)
            )
        for layer, norm in self.frobenius:
            rows.append(MetricsRecord(metric="frobenius_norm", value=norm, tag=layer, **base))
        if self.entropy is not None:
            rows.append(MetricsRecord(metric="posterior_entropy", value=self.entropy, **base))
        for epoch, value in enumerate(self.probe_curve):
            rows.append(
                MetricsRecord(metric="probe_accuracy", value=value, **{**base, "epoch": epoch})
            )
        return rows


def _require_examples(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise AnalysisError("Cannot evaluate on an empty dataset")


def _spans(n: int, batch_size: Optional[int]) -> Iterator[slice]:
    step = batch_size or max(n, 1)
    for start in range(0, n, step):
        yield slice(start, min(start + step, n))


def clean_accuracy(model: Classifier, dataset: Dataset, batch_size: Optional[int] = None) -> float:
    """Fraction of unperturbed examples classified correctly."""
    _require_examples(dataset)
    correct = 0
    for span in _spans(len(dataset), batch_size):
        predictions = model.predict(dataset.inputs[span])
        correct += int(np.sum(predictions == dataset.labels[span]))
    return correct / len(dataset)


def _attack_batches(
    model: Classifier,
    dataset: Dataset,
    cfg: AttackConfig,
    batch_size: Optional[int],
) -> Iterator[tuple[slice, np.ndarray]]:
    frozen = model.frozen()
    ids = np.arange(len(dataset))
    for span in _spans(len(dataset), batch_size):
        result = multi_restart_attack(
            frozen.logits, dataset.inputs[span], dataset.labels[span], cfg, example_ids=ids[span]
        )
        yield span, result.x_adv


def robust_accuracy(
    model: Classifier,
    dataset: Dataset,
    cfg: AttackConfig,
    batch_size: Optional[int] = None,
) -> float:
    """
    Fraction of examples still classified correctly after a multi-restart attack.

    Args:
        model: Attacked model
        dataset: Evaluation data
        cfg: Attack configuration (K steps, restarts, epsilon)
        batch_size: Attack batch size; results do not depend on it

    Raises:
        AnalysisError: If the dataset is empty
    """
    _require_examples(dataset)
    correct = 0
    for span, x_adv in _attack_batches(model, dataset, cfg, batch_size):
        correct += int(np.sum(model.predict(x_adv) == dataset.labels[span]))
    accuracy = correct / len(dataset)
    logger.debug(
        f"{model.name}: robust accuracy {accuracy:.4f} "
        f"(eps={cfg.epsilon}, K={cfg.steps}, restarts={cfg.restarts})"
    )
    return accuracy


def blackbox_transfer(
    surrogate: Classifier,
    target: Classifier,
    dataset: Dataset,
    cfg: AttackConfig,
    batch_size: Optional[int] = None,
    base: str = CLEAN_CORRECT,
) -> TransferCell:
    """
    Success rate on ``target`` of perturbations crafted with ``surrogate`` gradients.

    With ``base="clean_correct"`` the rate counts only examples the target
    classifies correctly when clean; with ``base="all"`` it is the target's
    error rate on every perturbed example.

    Raises:
        AnalysisError: If the two models disagree on classes or input shape
    """
    _require_examples(dataset)
    if surrogate.num_classes != target.num_classes:
        raise AnalysisError(
            f"Class-count mismatch: {surrogate.name} has {surrogate.num_classes}, "
            f"{target.name} has {target.num_classes}"
        )
    if surrogate.spec.input_shape != target.spec.input_shape:
        raise AnalysisError(
            f"Input mismatch: {surrogate.spec.input_shape} vs {target.spec.input_shape}"
        )
    if base not in (CLEAN_CORRECT, ALL_EXAMPLES):
        raise AnalysisError(f"Unknown success-rate base '{base}'")

    fooled, counted = 0, 0
    for span, x_adv in _attack_batches(surrogate, dataset, cfg, batch_size):
        labels = dataset.labels[span]
        wrong = target.predict(x_adv) != labels
        if base == CLEAN_CORRECT:
            keep = target.predict(dataset.inputs[span]) == labels
        else:
            keep = np.ones_like(wrong)
        fooled += int(np.sum(wrong & keep))
        counted += int(np.sum(keep))

    rate = fooled / counted if counted else 0.0
    logger.debug(f"transfer {surrogate.name} -> {target.name}: {rate:.4f} over {counted} examples")
    return TransferCell(surrogate.name, target.name, rate, counted)


def whitebox_success_rate(
    model: Classifier,
    dataset: Dataset,
    cfg: AttackConfig,
    batch_size: Optional[int] = None,
) -> float:
    """Attack success against a model using its own gradients, over clean-correct examples."""
    return blackbox_transfer(model, model, dataset, cfg, batch_size).success_rate


def transfer_matrix(
    models: Sequence[Classifier],
    dataset: Dataset,
    cfg: AttackConfig,
    batch_size: Optional[int] = None,
    base: str = CLEAN_CORRECT,
) -> list[TransferCell]:
    """Every (surrogate, target) pair; the diagonal holds white-box rates."""
    return [
        blackbox_transfer(surrogate, target, dataset, cfg, batch_size, base)
        for surrogate in models
        for target in models
    ]


def sweep_step_size(epsilon: float, steps: int, fallback: float) -> float:
    """2.5 * eps / K, or ``fallback`` for a zero radius."""
    return 2.5 * epsilon / steps if epsilon > 0 else fallback


def epsilon_sweep(
    model: Classifier,
    dataset: Dataset,
    eps_list: Sequence[float],
    steps: int = 20,
    cfg: Optional[AttackConfig] = None,
    batch_size: Optional[int] = None,
) -> list[tuple[float, float]]:
    """
    Robust accuracy at each radius, with step size 2.5 * eps / K.

    Args:
        model: Attacked model
        dataset: Evaluation data
        eps_list: Radii in ascending order
        steps: PGD iterations K
        cfg: Template supplying restarts, random start, seed and clamp
        batch_size: Attack batch size

    Returns:
        (epsilon, robust accuracy) pairs in input order

    Raises:
        AnalysisError: If eps_list is not sorted ascending or steps < 1
    """
    eps_list = [float(e) for e in eps_list]
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise AnalysisError(f"eps_list must be sorted ascending: {eps_list}")
    if steps < 1:
        raise AnalysisError("epsilon sweep needs at least one PGD step")
    template = cfg or AttackConfig.evaluation()

    curve = []
    for eps in eps_list:
        step_cfg = replace(
            template.with_epsilon(eps),
            steps=steps,
            step_size=sweep_step_size(eps, steps, template.step_size),
        )
        curve.append((eps, robust_accuracy(model, dataset, step_cfg, batch_size)))
    return curve


def mean_min_perturbation(
    model: Classifier,
    dataset: Dataset,
    cfg: AttackConfig,
    tol: float = 1e-3,
    eps_hi: float = 0.5,
    batch_size: Optional[int] = None,
) -> tuple[Optional[float], int, np.ndarray]:
    """
    Average smallest successful radius over clean-correct, flippable examples.

    Returns:
        (mean or None when no example qualifies, count of unflippable examples,
        per-example radii)
    """
    _require_examples(dataset)
    frozen = model.frozen()
    ids = np.arange(len(dataset))
    radii = np.concatenate(
        [
            min_perturbation(
                frozen.logits,
                dataset.inputs[span],
                dataset.labels[span],
                tol,
                eps_hi,
                cfg,
                example_ids=ids[span],
            ).epsilon
            for span in _spans(len(dataset), batch_size)
        ]
    )
    counted = radii[np.isfinite(radii) & (radii > 0)]
    unbounded = int(np.sum(np.isinf(radii)))
    mean = float(np.mean(counted)) if counted.size else None
    return mean, unbounded, radii


def entropy_report(model: Classifier, dataset: Dataset, batch_size: Optional[int] = None) -> float:
    """Mean posterior entropy over every example, in [0, ln C]."""
    _require_examples(dataset)
    frozen = model.frozen()
    logits = np.concatenate(
        [frozen.logits(dataset.inputs[span]).data for span in _spans(len(dataset), batch_size)]
    )
    return posterior_entropy(logits)


# Compression probe


def random_binary_labels(n: int, seed: int) -> np.ndarray:
    """Balanced random labels: a seeded permutation marks ceil(n / 2) ones."""
    labels = np.zeros(n, dtype=np.int64)
    order = np.random.default_rng(seed).permutation(n)
    labels[order[: (n + 1) // 2]] = 1
    return labels


def _standardize(values: np.ndarray) -> np.ndarray:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    return (values - mean) / np.where(std > 0, std, 1.0)


def fit_random_labels(
    inputs: np.ndarray,
    label_seed: int = 0,
    widths: Sequence[int] = (400, 200),
    epochs: int = 50,
    lr: float = 0.01,
    momentum: float = 0.9,
    batch_size: int = 128,
) -> list[float]:
    """
    Train a two-hidden-layer MLP to fit random binary labels on fixed inputs.

    Inputs are flattened and standardized per dimension; a constant dimension
    stays at zero.

    Returns:
        Training-set fit accuracy after each epoch
    """
    if len(widths) != 2:
        raise AnalysisError(f"The probe is a 2-layer MLP, got widths {tuple(widths)}")
    x = _standardize(np.asarray(inputs, dtype=np.float64).reshape(len(inputs), -1))
    y = random_binary_labels(len(x), label_seed)

    spec = ModelSpec.mlp((x.shape[1], *widths, 2))
    plan = TrainPlan(
        method="standard",
        model=spec,
        epochs=epochs,
        batch_size=batch_size,
        lr=lr,
        momentum=momentum,
        lr_milestones=(),
    )
    probe = new_learner("probe", spec, label_seed, lr, 0)

    curve = []
    for epoch in range(epochs):
        order = np.random.default_rng([label_seed, epoch]).permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            probe, _ = standard_step(Batch(x[idx], y[idx], idx), probe, plan)
        curve.append(float(np.mean(probe.classifier().predict(x) == y)))
    logger.debug(f"probe fit accuracy after {epochs} epochs: {curve[-1] if curve else 0.0:.4f}")
    return curve


def compression_probe(
    model: Classifier,
    dataset: Dataset,
    label_seed: int = 0,
    widths: Sequence[int] = (400, 200),
    epochs: int = 50,
    lr: float = 0.01,
    batch_size: Optional[int] = None,
) -> list[float]:
    """
    Fit random labels on the model's frozen penultimate features.

    Lower fit accuracy means the representation retains less
    example-specific information.
    """
    _require_examples(dataset)
    feats = np.concatenate(
        [
            features(model.params, model.spec, dataset.inputs[span], frozen=True).data
            for span in _spans(len(dataset), batch_size)
        ]
    )
    return fit_random_labels(feats, label_seed, widths, epochs, lr, batch_size=batch_size or 128)


# Reporting


def summarize_seeds(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise AnalysisError("Nothing to summarize")
    std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), std


def evaluate_model(
    model: Classifier,
    dataset: Dataset,
    cfg: AttackConfig,
    pgd_steps: Sequence[int] = (20,),
    min_perturbation_tol: Optional[float] = None,
    min_perturbation_hi: float = 0.5,
    probe_epochs: int = 0,
    probe_widths: Sequence[int] = (400, 200),
    label_seed: int = 0,
    batch_size: Optional[int] = None,
) -> EvalReport:
    """
    Build a full report for one model.

    Robust accuracy is measured once per entry of ``pgd_steps``; the minimum
    perturbation search runs when a tolerance is given and the probe when
    ``probe_epochs`` > 0.
    """
    report = EvalReport(model.name, clean_accuracy(model, dataset, batch_size))
    for steps in pgd_steps:
        step_cfg = replace(cfg, steps=int(steps))
        report.robust_accuracy[(step_cfg.steps, step_cfg.restarts, step_cfg.epsilon)] = (
            robust_accuracy(model, dataset, step_cfg, batch_size)
        )
    if min_perturbation_tol is not None:
        mean, unbounded, _ = mean_min_perturbation(
            model, dataset, cfg, min_perturbation_tol, min_perturbation_hi, batch_size
        )
        report.mean_min_perturbation = mean
        report.unbounded_count = unbounded
    report.frobenius = frobenius_norms(model.params)
    report.entropy = entropy_report(model, dataset, batch_size)
    if probe_epochs > 0:
        report.probe_curve = compression_probe(
            model, dataset, label_seed, probe_widths, probe_epochs, batch_size=batch_size
        )
    logger.info(
        f"{model.name}: clean={report.clean_accuracy:.4f} "
        + " ".join(f"pgd{k[0]}@{k[2]}={v:.4f}" for k, v in sorted(report.robust_accuracy.items()))
    )
    return report


def sweep_alpha(
    plan: TrainPlan,
    train_set: Dataset,
    test_set: Dataset,
    alphas: Sequence[float],
    cfg: AttackConfig,
    seeds: Optional[Sequence[int]] = None,
    batch_size: Optional[int] = None,
) -> list[MetricsRecord]:
    """
    Train ACT once per (alpha, seed) and report clean and robust accuracy of
    both models, followed by per-alpha ``_mean`` and ``_std`` rows.
    """
    seeds = list(seeds if seeds is not None else plan.seeds)
    rows: list[MetricsRecord] = []
    for alpha in alphas:
        alpha_plan = plan.with_method("act", alpha=float(alpha))
        per_metric: dict[tuple[str, str], list[float]] = {}
        for seed in seeds:
            result = train(alpha_plan, train_set, seed=seed)
            for role, model in result.models.items():
                values = {
                    "clean_accuracy": clean_accuracy(model, test_set, batch_size),
                    "robust_accuracy": robust_accuracy(model, test_set, cfg, batch_size),
                }
                for metric, value in values.items():
                    per_metric.setdefault((role, metric), []).append(value)
                    rows.append(_sweep_row(metric, value, role, seed, float(alpha), cfg))
        for (role, metric), values in sorted(per_metric.items()):
            mean, std = summarize_seeds(values)
            rows.append(_sweep_row(f"{metric}_mean", mean, role, None, float(alpha), cfg))
            rows.append(_sweep_row(f"{metric}_std", std, role, None, float(alpha), cfg))
        logger.info(f"alpha={alpha}: {len(seeds)} seed(s) done")
    return rows


def _sweep_row(
    metric: str,
    value: float,
    role: str,
    seed: Optional[int],
    alpha: float,
    cfg: AttackConfig,
) -> MetricsRecord:
    return MetricsRecord(
        kind="sweep_alpha",
        method="act",
        model=role,
        seed=seed,
        metric=metric,
        value=value,
        epsilon=cfg.epsilon if metric.startswith("robust") else None,
        steps=cfg.steps if metric.startswith("robust") else None,
        step_size=cfg.step_size if metric.startswith("robust") else None,
        restarts=cfg.restarts if metric.startswith("robust") else None,
        alpha=alpha,
    )

