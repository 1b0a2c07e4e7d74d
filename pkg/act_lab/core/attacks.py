"""
L-infinity adversarial attacks for ACT Lab.
PGD over arbitrary differentiable objectives, FGSM, multi-restart worst-case
selection and minimum-perturbation bisection.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

from .objectives import LogitObjective, cross_entropy_objective
from .tensor import ShapeError, Tensor, backward

logger = logging.getLogger(__name__)

# Maps an input batch tensor to a scalar to maximize.
Objective = Callable[[Tensor], Tensor]
# Maps an input batch tensor to N x C logits.
ForwardFn = Callable[[Tensor], Tensor]
ObjectiveBuilder = Callable[[np.ndarray], LogitObjective]

UNBOUNDED = math.inf


class AttackConfigError(ValueError):
    """Exception raised for invalid attack budgets or configurations."""

    pass


@dataclass(frozen=True)
class AttackBudget:
    """The allowed perturbation set: an L-inf ball intersected with the pixel range."""

    epsilon: float
    clamp: tuple[float, float] = (0.0, 1.0)
    norm: str = "linf"

    def __post_init__(self) -> None:
        if self.norm != "linf":
            raise AttackConfigError(f"Only the linf norm is supported, got {self.norm}")
        if self.epsilon < 0:
            raise AttackConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.clamp[0] < self.clamp[1]:
            raise AttackConfigError(f"clamp lower bound must be below upper: {self.clamp}")


@dataclass(frozen=True)
class AttackConfig:
    """PGD settings: budget, K steps, step size, random start, restarts and seed."""

    budget: AttackBudget
    steps: int = 10
    step_size: float = 0.007
    random_init: bool = True
    restarts: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise AttackConfigError(f"steps must be >= 0, got {self.steps}")
        if self.restarts < 1:
            raise AttackConfigError(f"restarts must be >= 1, got {self.restarts}")
        if self.step_size <= 0:
            raise AttackConfigError(f"step_size must be > 0, got {self.step_size}")

    @classmethod
    def training(cls, epsilon: float = 0.031, seed: int = 0) -> "AttackConfig":
        return cls(AttackBudget(epsilon), steps=10, step_size=0.007, random_init=True, seed=seed)

    @classmethod
    def evaluation(cls, epsilon: float = 0.031, seed: int = 0) -> "AttackConfig":
        return cls(
            AttackBudget(epsilon), steps=20, step_size=0.003, random_init=True, restarts=5, seed=seed
        )

    @property
    def epsilon(self) -> float:
        return self.budget.epsilon

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return replace(self, budget=replace(self.budget, epsilon=epsilon))

    def with_seed(self, seed: int) -> "AttackConfig":
        return replace(self, seed=int(seed))


@dataclass
class AttackResult:
    """Worst-case perturbations chosen across restarts."""

    delta: np.ndarray
    x_adv: np.ndarray
    flipped: np.ndarray
    objective: np.ndarray


@dataclass
class MinPerturbationResult:
    """Bisection bracket per example; ``epsilon`` is the smallest size seen to succeed."""

    epsilon: np.ndarray
    lower: np.ndarray

    @property
    def width(self) -> np.ndarray:
        return np.where(np.isfinite(self.epsilon), self.epsilon - self.lower, UNBOUNDED)


def _per_example(values: Union[float, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Broadcast a scalar or per-example vector against a batch."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr
    return arr.reshape((x.shape[0],) + (1,) * (x.ndim - 1))


def project_linf(
    delta: np.ndarray,
    x: np.ndarray,
    budget: AttackBudget,
    epsilon: Optional[Union[float, np.ndarray]] = None,
) -> np.ndarray:
    """
    Project a perturbation into the budget.

    Clips delta coordinatewise to [-eps, eps], then clips x + delta to the clamp
    range, and returns the adjusted delta.

    Args:
        delta: Perturbation
        x: Clean inputs of the same shape
        budget: Allowed perturbation set
        epsilon: Optional per-example radii overriding ``budget.epsilon``

    Raises:
        ShapeError: If delta and x differ in shape
    """
    delta = np.asarray(delta.data if isinstance(delta, Tensor) else delta, dtype=np.float64)
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if delta.shape != x.shape:
        raise ShapeError(f"project_linf: delta {delta.shape} does not match x {x.shape}")
    eps = _per_example(budget.epsilon if epsilon is None else epsilon, x)
    delta = np.clip(delta, -eps, eps)
    low, high = budget.clamp
    adv = x + delta
    outside = (adv < low) | (adv > high)
    if np.any(outside):
        # coordinates inside the pixel range keep their exact delta
        delta = np.where(outside, np.clip(adv, low, high) - x, delta)
    return delta


def _example_ids(x: np.ndarray, example_ids: Optional[np.ndarray]) -> np.ndarray:
    if example_ids is None:
        return np.arange(x.shape[0])
    return np.asarray(example_ids, dtype=np.int64)


def _random_start(
    x: np.ndarray,
    seed: int,
    restart: int,
    example_ids: np.ndarray,
) -> np.ndarray:
    """Uniform draw in [-1, 1]; each example uses its own (seed, id, restart) stream."""
    unit = np.empty_like(x)
    for row, example_id in enumerate(example_ids):
        rng = np.random.default_rng([int(seed), int(example_id), int(restart)])
        unit[row] = rng.uniform(-1.0, 1.0, size=x.shape[1:])
    return unit


def _sign_ascent(
    objective: Objective,
    x: np.ndarray,
    budget: AttackBudget,
    eps: Union[float, np.ndarray],
    step_size: Union[float, np.ndarray],
    steps: int,
    random_init: bool,
    seed: int,
    restart: int,
    example_ids: np.ndarray,
) -> np.ndarray:
    eps_b = _per_example(eps, x)
    step_b = _per_example(step_size, x)
    if random_init:
        start = _random_start(x, seed, restart, example_ids) * eps_b
        delta = project_linf(start, x, budget, eps)
    else:
        delta = np.zeros_like(x)
    for _ in range(steps):
        x_adv = Tensor(x + delta, requires_grad=True)
        grad = backward(objective(x_adv), [x_adv])[0]
        delta = project_linf(delta + step_b * np.sign(grad), x, budget, eps)
    return delta


def pgd(
    objective: Objective,
    x: np.ndarray,
    cfg: AttackConfig,
    restart: int = 0,
    example_ids: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Projected sign-gradient ascent on a scalar objective.

    Runs K iterations of delta <- project(delta + step_size * sign(grad)),
    starting from zero or from a uniform draw in the ball.

    Args:
        objective: Differentiable scalar function of the perturbed input
        x: Clean input batch
        cfg: Attack configuration
        restart: Restart index feeding the per-example random streams
        example_ids: Stable example identifiers (defaults to batch positions)

    Returns:
        delta* with x + delta* inside the budget and clamp range
    """
    x = np.asarray(x, dtype=np.float64)
    return _sign_ascent(
        objective,
        x,
        cfg.budget,
        cfg.epsilon,
        cfg.step_size,
        cfg.steps,
        cfg.random_init,
        cfg.seed,
        restart,
        _example_ids(x, example_ids),
    )


def fgsm(objective: Objective, x: np.ndarray, budget: AttackBudget) -> np.ndarray:
    """Single full-size signed step from zero."""
    if budget.epsilon == 0:
        return np.zeros_like(np.asarray(x, dtype=np.float64))
    cfg = AttackConfig(budget, steps=1, step_size=budget.epsilon, random_init=False)
    return pgd(objective, x, cfg)


def multi_restart_attack(
    forward: ForwardFn,
    x: np.ndarray,
    y: np.ndarray,
    cfg: AttackConfig,
    objective_builder: ObjectiveBuilder = cross_entropy_objective,
    example_ids: Optional[np.ndarray] = None,
) -> AttackResult:
    """
    Worst case over random restarts.

    Per example, a perturbation that flips the prediction beats one that does
    not; among equals the higher objective wins, and earlier restarts win ties.

    Args:
        forward: Logits of the attacked model (parameters held constant)
        x: Clean inputs
        y: True labels
        cfg: Attack configuration (``restarts`` >= 1)
        objective_builder: Builds the per-example objective from the labels
        example_ids: Stable example identifiers for the random streams
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ids = _example_ids(x, example_ids)
    per_example = objective_builder(y)

    def objective(x_adv: Tensor) -> Tensor:
        return per_example(forward(x_adv)).sum()

    best_delta = np.zeros_like(x)
    best_flip = np.zeros(x.shape[0], dtype=bool)
    best_value = np.full(x.shape[0], -np.inf)
    for restart in range(cfg.restarts):
        delta = pgd(objective, x, cfg, restart=restart, example_ids=ids)
        logits = forward(Tensor(x + delta))
        value = per_example(Tensor(logits.data)).data
        flip = logits.data.argmax(axis=1) != y
        better = (flip & ~best_flip) | ((flip == best_flip) & (value > best_value))
        best_delta[better] = delta[better]
        best_flip = np.where(better, flip, best_flip)
        best_value = np.where(better, value, best_value)

    logger.debug(
        f"multi-restart attack: {int(best_flip.sum())}/{x.shape[0]} flipped "
        f"(eps={cfg.epsilon}, K={cfg.steps}, restarts={cfg.restarts})"
    )
    return AttackResult(best_delta, x + best_delta, best_flip, best_value)


def min_perturbation(
    forward: ForwardFn,
    x: np.ndarray,
    y: np.ndarray,
    tol: float,
    eps_hi: float,
    cfg: AttackConfig,
    example_ids: Optional[np.ndarray] = None,
) -> MinPerturbationResult:
    """
    Smallest L-inf radius at which PGD flips each example, by bisection.

    Each midpoint runs PGD with step size 2.5 * eps / K. Misclassified clean
    inputs report 0; examples the attack cannot flip at ``eps_hi`` report
    ``UNBOUNDED``.

    Args:
        forward: Logits of the attacked model
        x: Clean inputs
        y: True labels
        tol: Bracket width at which bisection stops
        eps_hi: Upper end of the search interval
        cfg: Template supplying K, random start, restarts, seed and clamp
        example_ids: Stable example identifiers for the random streams
    """
    if tol <= 0 or eps_hi <= 0:
        raise AttackConfigError("tol and eps_hi must be positive")
    if cfg.steps < 1:
        raise AttackConfigError("minimum-perturbation search needs at least one PGD step")

    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    ids = _example_ids(x, example_ids)

    def succeeds(eps: np.ndarray, rows: np.ndarray) -> np.ndarray:
        xs, ys, row_ids = x[rows], y[rows], ids[rows]
        per_rows = cross_entropy_objective(ys)

        def objective(x_adv: Tensor) -> Tensor:
            return per_rows(forward(x_adv)).sum()

        flipped = np.zeros(rows.size, dtype=bool)
        for restart in range(cfg.restarts):
            delta = _sign_ascent(
                objective,
                xs,
                cfg.budget,
                eps,
                2.5 * eps / cfg.steps,
                cfg.steps,
                cfg.random_init,
                cfg.seed,
                restart,
                row_ids,
            )
            flipped |= forward(Tensor(xs + delta)).data.argmax(axis=1) != ys
        return flipped

    n = x.shape[0]
    correct = forward(Tensor(x)).data.argmax(axis=1) == y
    hi = np.where(correct, float(eps_hi), 0.0)
    lo = np.zeros(n)

    active = np.flatnonzero(correct)
    if active.size:
        ok = succeeds(np.full(active.size, float(eps_hi)), active)
        hi[active[~ok]] = UNBOUNDED
        lo[active[~ok]] = float(eps_hi)
        active = active[ok]

    while active.size and np.max(hi[active] - lo[active]) > tol:
        mid = 0.5 * (lo[active] + hi[active])
        ok = succeeds(mid, active)
        hi[active[ok]] = mid[ok]
        lo[active[~ok]] = mid[~ok]

    logger.debug(f"min perturbation over {n} examples: {int(np.isinf(hi).sum())} unbounded")
    return MinPerturbationResult(hi, lo)
