"""
Training objectives for ACT Lab.
Cross-entropy, KL mimicry, the concurrent robust/natural losses, the Madry and
TRADES baselines, and posterior entropy.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import (
    Tensor,
    as_tensor,
    log_softmax,
    log_softmax_array,
    pick,
)

logger = logging.getLogger(__name__)

# Maps a logits tensor to one loss value per example.
LogitObjective = Callable[[Tensor], Tensor]


class LabelError(ValueError):
    """Exception raised for labels outside [0, C)."""

    pass


class MixWeightError(ValueError):
    """Exception raised for mixing weights outside [0, 1]."""

    pass


@dataclass(frozen=True)
class MixWeight:
    """Convex mixing weight between the task term and the mimicry term."""

    alpha: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise MixWeightError(f"alpha must lie in [0, 1], got {self.alpha}")


@dataclass
class LossValue:
    """Scalar loss on the tape plus its named sub-terms as plain floats."""

    value: Tensor
    terms: dict[str, float] = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.value.item()


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise LabelError(f"Expected {logits.shape[0]} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise LabelError(f"Labels must lie in [0, {logits.shape[1]})")
    return labels.astype(np.int64)


def per_example_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """-log p(label) for each row of the batch."""
    labels = _check_labels(logits, labels)
    return -pick(log_softmax(logits), labels)


def per_example_kl(reference_logits: Tensor, learner_logits: Tensor) -> Tensor:
    """
    KL(p_ref || p_learner) for each row, with the reference held constant.

    Raises:
        ValueError: If the two logit batches differ in shape
    """
    reference_logits, learner_logits = as_tensor(reference_logits), as_tensor(learner_logits)
    if reference_logits.shape != learner_logits.shape:
        raise ValueError(
            f"KL shape mismatch: {reference_logits.shape} vs {learner_logits.shape}"
        )
    log_ref = log_softmax_array(reference_logits.data)
    p_ref = np.exp(log_ref)
    # p_ref * log p_ref is constant; only the cross term carries gradient
    return (Tensor(p_ref) * (Tensor(log_ref) - log_softmax(learner_logits))).sum(axis=1)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> LossValue:
    """
    Mean cross-entropy over the batch.

    Args:
        logits: N x C logits
        labels: N class indices

    Returns:
        LossValue with a single ``ce`` term

    Raises:
        LabelError: If a label is out of range
    """
    value = per_example_cross_entropy(logits, labels).mean()
    return LossValue(value, {"ce": value.item()})


def kl_divergence(reference_logits: Tensor, learner_logits: Tensor) -> LossValue:
    """Mean KL(reference || learner); no gradient reaches the reference."""
    value = per_example_kl(reference_logits, learner_logits).mean()
    return LossValue(value, {"kl": value.item()})


def _mix(task: LossValue, mimic: LossValue, alpha: float) -> LossValue:
    weight = MixWeight(alpha)
    value = task.value * (1.0 - weight.alpha) + mimic.value * weight.alpha
    return LossValue(
        value,
        {
            "task": (1.0 - weight.alpha) * task.total,
            "mimicry": weight.alpha * mimic.total,
        },
    )


def act_loss_G(
    G_adv_logits: Tensor,
    F_clean_logits: Tensor,
    labels: np.ndarray,
    alpha: float,
) -> LossValue:
    """
    Robust-model loss: (1 - alpha) CE(G(x+delta), y) + alpha KL(F(x) || G(x+delta)).

    The natural model's distribution is a constant here.
    """
    return _mix(
        cross_entropy(G_adv_logits, labels),
        kl_divergence(F_clean_logits, G_adv_logits),
        alpha,
    )


def act_loss_F(
    F_clean_logits: Tensor,
    G_adv_logits: Tensor,
    labels: np.ndarray,
    alpha: float,
) -> LossValue:
    """
    Natural-model loss: (1 - alpha) CE(F(x), y) + alpha KL(G(x+delta) || F(x)).

    The robust model's distribution is a constant here.
    """
    return _mix(
        cross_entropy(F_clean_logits, labels),
        kl_divergence(G_adv_logits, F_clean_logits),
        alpha,
    )


def madry_loss(G_adv_logits: Tensor, labels: np.ndarray) -> LossValue:
    """Cross-entropy on adversarial logits only."""
    return cross_entropy(G_adv_logits, labels)


def trades_loss(
    clean_logits: Tensor,
    adv_logits: Tensor,
    labels: np.ndarray,
    inv_lambda: float,
) -> LossValue:
    """
    TRADES objective: CE(clean, y) + inv_lambda * KL(clean || adv).

    The clean distribution sits in the KL reference slot as a constant.

    Raises:
        ValueError: If inv_lambda is negative
    """
    if inv_lambda < 0:
        raise ValueError(f"inv_lambda must be non-negative, got {inv_lambda}")
    task = cross_entropy(clean_logits, labels)
    robust = kl_divergence(clean_logits, adv_logits)
    value = task.value + robust.value * inv_lambda
    return LossValue(value, {"task": task.total, "robust": inv_lambda * robust.total})


def posterior_entropy(logits: np.ndarray) -> float:
    """Mean over the batch of -sum p log p, in nats."""
    log_p = log_softmax_array(np.asarray(logits.data if isinstance(logits, Tensor) else logits))
    return float(np.mean(-(np.exp(log_p) * log_p).sum(axis=1)))


# Attack objective builders


def cross_entropy_objective(labels: np.ndarray) -> LogitObjective:
    """Per-example cross-entropy against fixed labels."""
    return lambda logits: per_example_cross_entropy(logits, labels)


def act_objective(F_clean_logits: np.ndarray, labels: np.ndarray, alpha: float) -> LogitObjective:
    """Per-example robust-model loss with the natural model's logits fixed."""
    weight = MixWeight(alpha)
    reference = Tensor(np.asarray(F_clean_logits, dtype=np.float64))

    def objective(logits: Tensor) -> Tensor:
        ce = per_example_cross_entropy(logits, labels)
        kl = per_example_kl(reference, logits)
        return ce * (1.0 - weight.alpha) + kl * weight.alpha

    return objective


def trades_objective(clean_logits: np.ndarray) -> LogitObjective:
    """Per-example KL(clean || perturbed) used by the TRADES inner maximization."""
    reference = Tensor(np.asarray(clean_logits, dtype=np.float64))
    return lambda logits: per_example_kl(reference, logits)
