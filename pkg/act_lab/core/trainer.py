"""
Training loops for ACT Lab.
Concurrent robust/natural training plus the Madry, TRADES and standard
baselines, driven by SGD with momentum and a milestone learning-rate schedule.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from ..services.datasets import Dataset, augment
from ..services.integrity import get_digest_service
from .attacks import AttackConfig, pgd
from .models import Classifier, ModelParams, ModelSpec, forward, init
from .objectives import (
    LossValue,
    MixWeight,
    MixWeightError,
    act_loss_F,
    act_loss_G,
    act_objective,
    cross_entropy,
    cross_entropy_objective,
    madry_loss,
    trades_loss,
    trades_objective,
)
from .records import MetricsRecord
from .tensor import NumericalError, ShapeError, Tensor, backward

logger = logging.getLogger(__name__)

METHODS = ("act", "madry", "trades", "standard")
ROBUST, NATURAL = "robust", "natural"


class TrainingError(Exception):
    """Exception raised when a training run cannot proceed."""

    pass


class PlanError(ValueError):
    """Exception raised for invalid training plans."""

    pass


def derive_seed(*keys: int) -> int:
    """Stable 32-bit seed for a tuple of integer keys."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(frozen=True)
class TrainPlan:
    """
    Everything that determines a training run apart from the data and the seed.

    ``alpha`` weights the mimicry term for ACT, ``inv_lambda`` the robustness
    term for TRADES. ``lr_milestones`` lists (epoch, factor) pairs applied
    cumulatively from that epoch on. ``eval_every`` > 0 adds a robust-accuracy
    evaluation every that many epochs using ``eval_attack`` (or ``attack``).
    """

    method: str = "act"
    model: ModelSpec = field(default_factory=lambda: ModelSpec.mlp((2, 32, 32, 2)))
    alpha: float = 0.9
    inv_lambda: float = 5.0
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_milestones: tuple[tuple[int, float], ...] = ((60, 0.2), (120, 0.2), (150, 0.2))
    attack: AttackConfig = field(default_factory=AttackConfig.training)
    seeds: tuple[int, ...] = (0,)
    dataset: str = "gaussians"
    augment_pad: int = 0
    augment_flip: bool = False
    eval_every: int = 0
    eval_attack: Optional[AttackConfig] = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise PlanError(f"Unknown method '{self.method}', expected one of {METHODS}")
        try:
            MixWeight(self.alpha)
        except MixWeightError as e:
            raise PlanError(str(e))
        if self.inv_lambda < 0:
            raise PlanError(f"inv_lambda must be >= 0, got {self.inv_lambda}")
        if self.epochs < 0:
            raise PlanError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise PlanError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise PlanError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise PlanError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise PlanError(f"weight_decay must be >= 0, got {self.weight_decay}")
        epochs = [m for m, _ in self.lr_milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])) or any(m < 0 for m in epochs):
            raise PlanError(f"lr milestones must be strictly increasing: {self.lr_milestones}")
        if any(not 0.0 < f <= 1.0 for _, f in self.lr_milestones):
            raise PlanError(f"lr milestone factors must lie in (0, 1]: {self.lr_milestones}")
        if not self.seeds:
            raise PlanError("A plan needs at least one seed")
        if self.augment_pad < 0 or self.eval_every < 0:
            raise PlanError("augment_pad and eval_every must be >= 0")

    @property
    def evaluation_attack(self) -> AttackConfig:
        return self.eval_attack or self.attack

    @property
    def trains_natural(self) -> bool:
        return self.method == "act"

    def with_method(self, method: str, alpha: Optional[float] = None) -> "TrainPlan":
        return replace(self, method=method, alpha=self.alpha if alpha is None else alpha)

    def to_dict(self) -> dict[str, Any]:
        """JSON-ready description used for digests and checkpoint metadata."""

        def attack(cfg: AttackConfig) -> dict[str, Any]:
            return {
                "epsilon": cfg.epsilon,
                "clamp": list(cfg.budget.clamp),
                "steps": cfg.steps,
                "step_size": cfg.step_size,
                "random_init": cfg.random_init,
                "restarts": cfg.restarts,
                "seed": cfg.seed,
            }

        return {
            "method": self.method,
            "model": self.model.to_descriptor(),
            "alpha": self.alpha,
            "inv_lambda": self.inv_lambda,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_milestones": [[m, f] for m, f in self.lr_milestones],
            "attack": attack(self.attack),
            "seeds": list(self.seeds),
            "dataset": self.dataset,
            "augment_pad": self.augment_pad,
            "augment_flip": self.augment_flip,
            "eval_every": self.eval_every,
            "eval_attack": attack(self.eval_attack) if self.eval_attack else None,
        }

    def digest(self) -> str:
        return get_digest_service().digest_json(self.to_dict())


@dataclass
class OptimizerState:
    """Per-parameter momentum buffers plus the current learning rate."""

    velocity: dict[str, np.ndarray]
    lr: float

    @classmethod
    def zeros(cls, params: ModelParams, lr: float) -> "OptimizerState":
        return cls({name: np.zeros_like(t.data) for name, t in params.items()}, lr)


@dataclass
class Learner:
    """A model being trained: spec, current parameters and optimizer state."""

    name: str
    spec: ModelSpec
    params: ModelParams
    state: OptimizerState

    def classifier(self) -> Classifier:
        return Classifier(self.spec, self.params, self.name)


@dataclass
class Batch:
    """One minibatch; ``indices`` are dataset positions used as example ids."""

    inputs: np.ndarray
    labels: np.ndarray
    indices: np.ndarray

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


@dataclass
class StepResult:
    """Loss decomposition of one step, per trained model."""

    losses: dict[str, LossValue]
    delta: Optional[np.ndarray] = None


@dataclass
class TrainResult:
    """Final models of a run and its metrics stream."""

    robust: Classifier
    natural: Optional[Classifier]
    records: list[MetricsRecord]
    seed: int
    plan: TrainPlan

    @property
    def models(self) -> dict[str, Classifier]:
        out = {ROBUST: self.robust}
        if self.natural is not None:
            out[NATURAL] = self.natural
        return out


def sgd_momentum_step(
    params: ModelParams,
    grads: Sequence[np.ndarray],
    state: OptimizerState,
    momentum: float,
    weight_decay: float = 0.0,
) -> tuple[ModelParams, OptimizerState]:
    """
    One SGD step with heavy-ball momentum.

    v <- momentum * v + (g + weight_decay * p);  p <- p - lr * v

    Args:
        params: Current parameters
        grads: One gradient per parameter, in parameter order
        state: Velocities and learning rate
        momentum: Momentum coefficient
        weight_decay: L2 coefficient added to the gradient

    Returns:
        New parameters and new optimizer state; the inputs are not modified

    Raises:
        ShapeError: If a gradient or velocity does not match its parameter
    """
    names = params.names()
    if len(grads) != len(names):
        raise ShapeError(f"Expected {len(names)} gradients, got {len(grads)}")

    new_arrays: dict[str, np.ndarray] = {}
    new_velocity: dict[str, np.ndarray] = {}
    for name, grad in zip(names, grads):
        p = params[name].data
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape or grad.shape != p.shape:
            raise ShapeError(
                f"{name}: parameter {p.shape}, gradient {grad.shape}, "
                f"velocity {None if v is None else v.shape}"
            )
        g = grad + weight_decay * p if weight_decay else grad
        v_next = momentum * v + g
        new_velocity[name] = v_next
        new_arrays[name] = p - state.lr * v_next

    return params.with_arrays(new_arrays), OptimizerState(new_velocity, state.lr)


def lr_at(epoch: int, plan: TrainPlan) -> float:
    """Initial rate times every milestone factor whose epoch has been reached."""
    if epoch < 0:
        raise PlanError(f"epoch must be >= 0, got {epoch}")
    lr = plan.lr
    for milestone, factor in plan.lr_milestones:
        if milestone <= epoch:
            lr *= factor
    return lr


def _gradients(loss: LossValue, params: ModelParams) -> list[np.ndarray]:
    if not np.isfinite(loss.total):
        raise NumericalError(f"non-finite loss {loss.total}")
    return backward(loss.value, [params[name] for name in params.names()])


def _apply(learner: Learner, grads: list[np.ndarray], plan: TrainPlan) -> Learner:
    params, state = sgd_momentum_step(
        learner.params, grads, learner.state, plan.momentum, plan.weight_decay
    )
    return Learner(learner.name, learner.spec, params, state)


def _attack_forward(learner: Learner) -> Callable[[Tensor], Tensor]:
    frozen = learner.params.frozen()
    return lambda x: forward(frozen, learner.spec, x)


def act_step(
    batch: Batch,
    robust: Learner,
    natural: Learner,
    plan: TrainPlan,
    attack: Optional[AttackConfig] = None,
    update_order: tuple[str, str] = (ROBUST, NATURAL),
) -> tuple[Learner, Learner, StepResult]:
    """
    One concurrent step.

    The perturbation maximizes the robust model's loss with both models frozen.
    Both losses use that single perturbation and the pre-update parameters;
    the two updates are then applied in ``update_order``, which cannot change
    the outcome.

    Args:
        batch: Clean minibatch
        robust: Robust model G (trained on perturbed inputs)
        natural: Natural model F (trained on clean inputs)
        plan: Training plan supplying alpha and optimizer settings
        attack: Attack for this step (defaults to ``plan.attack``)
        update_order: Order in which the two updates are applied

    Returns:
        Updated robust and natural learners plus the step's losses
    """
    cfg = attack or plan.attack
    x, y = batch.inputs, batch.labels

    F_clean_ref = forward(natural.params.frozen(), natural.spec, x).data
    per_example = act_objective(F_clean_ref, y, plan.alpha)
    attacked = _attack_forward(robust)
    delta = pgd(lambda t: per_example(attacked(t)).sum(), x, cfg, example_ids=batch.indices)
    x_adv = x + delta

    theta = robust.params.trainable()
    phi = natural.params.trainable()
    G_adv_logits = forward(theta, robust.spec, x_adv)
    F_clean_logits = forward(phi, natural.spec, x)
    loss_G = act_loss_G(G_adv_logits, F_clean_logits, y, plan.alpha)
    loss_F = act_loss_F(F_clean_logits, G_adv_logits, y, plan.alpha)
    grads = {ROBUST: _gradients(loss_G, theta), NATURAL: _gradients(loss_F, phi)}

    learners = {ROBUST: robust, NATURAL: natural}
    if sorted(update_order) != sorted(learners):
        raise ValueError(f"update_order must name both models once: {update_order}")
    for role in update_order:
        learners[role] = _apply(learners[role], grads[role], plan)

    return learners[ROBUST], learners[NATURAL], StepResult({ROBUST: loss_G, NATURAL: loss_F}, delta)


def madry_step(
    batch: Batch,
    robust: Learner,
    plan: TrainPlan,
    attack: Optional[AttackConfig] = None,
) -> tuple[Learner, StepResult]:
    """Cross-entropy PGD perturbation, then an SGD step on the perturbed batch."""
    cfg = attack or plan.attack
    x, y = batch.inputs, batch.labels
    per_example = cross_entropy_objective(y)
    attacked = _attack_forward(robust)
    delta = pgd(lambda t: per_example(attacked(t)).sum(), x, cfg, example_ids=batch.indices)

    theta = robust.params.trainable()
    loss = madry_loss(forward(theta, robust.spec, x + delta), y)
    return _apply(robust, _gradients(loss, theta), plan), StepResult({ROBUST: loss}, delta)


def trades_step(
    batch: Batch,
    robust: Learner,
    plan: TrainPlan,
    attack: Optional[AttackConfig] = None,
) -> tuple[Learner, StepResult]:
    """
    TRADES step: the perturbation maximizes KL(G(x) || G(x + delta)), then
    SGD on CE(G(x), y) + inv_lambda * KL(G(x) || G(x + delta)).
    """
    cfg = attack or plan.attack
    x, y = batch.inputs, batch.labels
    attacked = _attack_forward(robust)
    per_example = trades_objective(attacked(Tensor(x)).data)
    delta = pgd(lambda t: per_example(attacked(t)).sum(), x, cfg, example_ids=batch.indices)

    theta = robust.params.trainable()
    loss = trades_loss(
        forward(theta, robust.spec, x), forward(theta, robust.spec, x + delta), y, plan.inv_lambda
    )
    return _apply(robust, _gradients(loss, theta), plan), StepResult({ROBUST: loss}, delta)


def standard_step(batch: Batch, robust: Learner, plan: TrainPlan) -> tuple[Learner, StepResult]:
    """Plain cross-entropy step on clean inputs."""
    theta = robust.params.trainable()
    loss = cross_entropy(forward(theta, robust.spec, batch.inputs), batch.labels)
    return _apply(robust, _gradients(loss, theta), plan), StepResult({ROBUST: loss})


def new_learner(name: str, spec: ModelSpec, seed: int, lr: float, stream: int) -> Learner:
    """Freshly initialized learner; ``stream`` separates G (0) from F (1)."""
    params = init(spec, derive_seed(seed, stream))
    return Learner(name, spec, params, OptimizerState.zeros(params, lr))


def _accuracy(learner: Learner, dataset: Dataset, batch_size: int) -> float:
    predictions = learner.classifier().predict(dataset.inputs, batch_size=batch_size)
    return float(np.mean(predictions == dataset.labels))


class _EpochLosses:
    """Example-weighted running means of each model's loss terms."""

    def __init__(self) -> None:
        self.sums: dict[str, dict[str, float]] = {}
        self.count = 0

    def add(self, step: StepResult, n: int) -> None:
        self.count += n
        for role, loss in step.losses.items():
            bucket = self.sums.setdefault(role, {})
            for name, value in [("loss", loss.total)] + sorted(loss.terms.items()):
                bucket[name] = bucket.get(name, 0.0) + value * n

    def means(self) -> dict[str, dict[str, float]]:
        return {
            role: {name: total / self.count for name, total in terms.items()}
            for role, terms in self.sums.items()
        }


def _record(
    plan: TrainPlan,
    seed: int,
    epoch: int,
    role: str,
    metric: str,
    value: float,
    cfg: Optional[AttackConfig] = None,
) -> MetricsRecord:
    cfg = cfg or plan.attack
    return MetricsRecord(
        kind="train",
        method=plan.method,
        model=role,
        seed=seed,
        epoch=epoch,
        metric=metric,
        value=float(value),
        epsilon=cfg.epsilon,
        steps=cfg.steps,
        step_size=cfg.step_size,
        restarts=cfg.restarts,
        alpha=plan.alpha if plan.method == "act" else None,
    )


def iterate_batches(dataset: Dataset, plan: TrainPlan, seed: int, epoch: int) -> list[Batch]:
    """Seeded shuffle of the dataset into minibatches, augmented when configured."""
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    batches = []
    for b, start in enumerate(range(0, len(dataset), plan.batch_size)):
        idx = order[start : start + plan.batch_size]
        inputs = dataset.inputs[idx]
        if inputs.ndim == 4 and (plan.augment_pad or plan.augment_flip):
            inputs = augment(inputs, plan.augment_pad, plan.augment_flip, [seed, epoch, b])
        batches.append(Batch(inputs, dataset.labels[idx], idx))
    return batches


def train(
    plan: TrainPlan,
    dataset: Dataset,
    seed: Optional[int] = None,
    eval_dataset: Optional[Dataset] = None,
) -> TrainResult:
    """
    Run a full training plan.

    Each epoch shuffles with the stream [seed, epoch]; each step attacks with a
    seed derived from (seed, epoch, batch). ACT trains both models; the other
    methods train only the robust slot.

    Args:
        plan: Training plan
        dataset: Training data
        seed: Run seed (defaults to the plan's first seed)
        eval_dataset: Data for periodic robust-accuracy evaluation (defaults
            to the training data)

    Returns:
        TrainResult with the final models and per-epoch metrics

    Raises:
        TrainingError: On an empty or mismatched dataset, or a non-finite loss
    """
    seed = plan.seeds[0] if seed is None else int(seed)
    if len(dataset) == 0:
        raise TrainingError("Training dataset is empty")
    if dataset.input_shape != plan.model.input_shape:
        raise TrainingError(
            f"Dataset inputs {dataset.input_shape} do not match model input {plan.model.input_shape}"
        )
    if dataset.num_classes is not None and dataset.num_classes > plan.model.num_classes:
        raise TrainingError(
            f"Dataset has {dataset.num_classes} classes, model only {plan.model.num_classes}"
        )

    robust = new_learner(ROBUST, plan.model, seed, lr_at(0, plan), 0)
    natural = new_learner(NATURAL, plan.model, seed, lr_at(0, plan), 1) if plan.trains_natural else None
    records: list[MetricsRecord] = []
    logger.info(
        f"Training {plan.method} for {plan.epochs} epochs on {len(dataset)} examples (seed={seed})"
    )

    for epoch in range(plan.epochs):
        lr = lr_at(epoch, plan)
        robust.state.lr = lr
        if natural is not None:
            natural.state.lr = lr

        losses = _EpochLosses()
        for b, batch in enumerate(iterate_batches(dataset, plan, seed, epoch)):
            cfg = plan.attack.with_seed(derive_seed(seed, epoch, b))
            try:
                if plan.method == "act":
                    robust, natural, step = act_step(batch, robust, natural, plan, cfg)
                elif plan.method == "madry":
                    robust, step = madry_step(batch, robust, plan, cfg)
                elif plan.method == "trades":
                    robust, step = trades_step(batch, robust, plan, cfg)
                else:
                    robust, step = standard_step(batch, robust, plan)
            except NumericalError as e:
                logger.error(f"Non-finite values at epoch {epoch}, batch {b}: {e}")
                raise TrainingError(
                    f"{plan.method} training diverged at epoch {epoch}, batch {b} "
                    f"(lr={lr}, seed={seed}): {e}"
                )
            losses.add(step, len(batch))

        learners = [robust] + ([natural] if natural is not None else [])
        for role, terms in losses.means().items():
            for metric, value in terms.items():
                records.append(_record(plan, seed, epoch, role, f"train_{metric}", value))
        accuracies = {}
        for learner in learners:
            accuracies[learner.name] = _accuracy(learner, dataset, plan.batch_size)
            records.append(
                _record(plan, seed, epoch, learner.name, "clean_accuracy", accuracies[learner.name])
            )
        records.append(_record(plan, seed, epoch, ROBUST, "lr", lr))

        if plan.eval_every and (epoch + 1) % plan.eval_every == 0:
            # analysis depends on this module for probe training
            from .analysis import robust_accuracy

            target = eval_dataset or dataset
            cfg = plan.evaluation_attack
            for learner in learners:
                value = robust_accuracy(learner.classifier(), target, cfg, batch_size=plan.batch_size)
                records.append(_record(plan, seed, epoch, learner.name, "robust_accuracy", value, cfg))

        summary = losses.means().get(ROBUST, {})
        logger.info(
            f"[{plan.method} seed={seed}] epoch {epoch + 1}/{plan.epochs} "
            f"loss={summary.get('loss', float('nan')):.4f} "
            + " ".join(f"{k}={v:.4f}" for k, v in sorted(summary.items()) if k != "loss")
            + " "
            + " ".join(f"acc[{k}]={v:.3f}" for k, v in accuracies.items())
        )

    return TrainResult(
        robust.classifier(),
        natural.classifier() if natural is not None else None,
        records,
        seed,
        plan,
    )

