"""Shared fixtures for the ACT Lab test suite."""

from __future__ import annotations

import numpy as np
import pytest

from act_lab.core.attacks import AttackBudget, AttackConfig
from act_lab.core.models import Classifier, ModelParams, ModelSpec, init
from act_lab.core.tensor import Tensor
from act_lab.core.trainer import TrainPlan
from act_lab.services.datasets import Dataset, synth_gaussians

TOY_MEANS = ((0.3, 0.47), (0.7, 0.53))
TOY_SIGMA = (0.1, 0.005)


def linear_classifier(weight: np.ndarray, bias: np.ndarray, name: str = "linear") -> Classifier:
    """A single dense layer with the given C x D weight and C bias."""
    weight = np.asarray(weight, dtype=np.float64)
    spec = ModelSpec.mlp((weight.shape[1], weight.shape[0]))
    params = ModelParams(
        {"dense0.weight": Tensor(weight), "dense0.bias": Tensor(np.asarray(bias, dtype=np.float64))}
    )
    return Classifier(spec, params, name)


@pytest.fixture
def make_linear():
    """Factory for single-layer classifiers with fixed weights."""
    return linear_classifier


@pytest.fixture
def toy_train() -> Dataset:
    """Small anisotropic two-Gaussian training split."""
    return synth_gaussians(40, TOY_MEANS, TOY_SIGMA, [0, 0], "train")


@pytest.fixture
def toy_test() -> Dataset:
    return synth_gaussians(40, TOY_MEANS, TOY_SIGMA, [0, 1], "test")


@pytest.fixture
def tiny_spec() -> ModelSpec:
    return ModelSpec.mlp((2, 8, 8, 2))


@pytest.fixture
def tiny_model(tiny_spec: ModelSpec) -> Classifier:
    return Classifier(tiny_spec, init(tiny_spec, 3), "tiny")


@pytest.fixture
def small_attack() -> AttackConfig:
    return AttackConfig(AttackBudget(0.05), steps=5, step_size=0.02, random_init=True, restarts=2)


@pytest.fixture
def quick_plan(tiny_spec: ModelSpec) -> TrainPlan:
    """A few cheap epochs of ACT on the tiny MLP."""
    return TrainPlan(
        method="act",
        model=tiny_spec,
        alpha=0.5,
        epochs=2,
        batch_size=16,
        lr=0.05,
        lr_milestones=(),
        attack=AttackConfig(AttackBudget(0.05), steps=3, step_size=0.02),
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
