"""
End-to-end protocols on the anisotropic two-Gaussian benchmark.

Every model is trained once per module: standard, Madry and ACT at three
mixing weights, for three seeds. The y-axis feature separates the classes by
many standard deviations but by less than the attack radius, so only
adversarially trained models can rely on the x-axis feature and stay robust.
"""

import numpy as np
import pytest

from act_lab.core.analysis import (
    blackbox_transfer,
    clean_accuracy,
    entropy_report,
    epsilon_sweep,
    robust_accuracy,
    whitebox_success_rate,
)
from act_lab.core.attacks import AttackBudget, AttackConfig
from act_lab.core.models import ModelSpec
from act_lab.core.trainer import TrainPlan, train
from act_lab.services.datasets import synth_gaussians

pytestmark = pytest.mark.slow

MEANS = ((0.3, 0.47), (0.7, 0.53))
SIGMA = (0.1, 0.005)
SEEDS = (0, 1, 2)
ALPHAS = (0.1, 0.5, 0.9)
ATTACK = AttackConfig(AttackBudget(0.1), steps=10, step_size=0.025)


def _plan(method: str, alpha: float = 0.9) -> TrainPlan:
    return TrainPlan(
        method=method,
        model=ModelSpec.mlp((2, 32, 32, 2)),
        alpha=alpha,
        epochs=100,
        batch_size=128,
        lr=0.05,
        momentum=0.9,
        lr_milestones=((50, 0.2), (75, 0.2)),
        attack=ATTACK,
    )


@pytest.fixture(scope="module")
def splits():
    train_set = synth_gaussians(200, MEANS, SIGMA, [0, 0], "train")
    test_set = synth_gaussians(200, MEANS, SIGMA, [0, 1], "test")
    return train_set, test_set


@pytest.fixture(scope="module")
def runs(splits):
    """(method, alpha, seed) -> TrainResult."""
    train_set, _ = splits
    results = {}
    for seed in SEEDS:
        results[("standard", None, seed)] = train(_plan("standard"), train_set, seed=seed)
        results[("madry", None, seed)] = train(_plan("madry"), train_set, seed=seed)
        for alpha in ALPHAS:
            results[("act", alpha, seed)] = train(_plan("act", alpha), train_set, seed=seed)
    return results


def _robust(runs, splits, key) -> float:
    return robust_accuracy(runs[key].robust, splits[1], ATTACK)


class TestRobustness:
    """Directional comparison of training methods."""

    def test_all_methods_fit_clean_data(self, runs, splits):
        """Test that every robust model classifies clean test points well."""
        for key, result in runs.items():
            assert clean_accuracy(result.robust, splits[1]) >= 0.75, key

    def test_act_beats_standard_training(self, runs, splits):
        """Test a gap of at least 20 points in robust accuracy."""
        for seed in SEEDS:
            act = _robust(runs, splits, ("act", 0.9, seed))
            standard = _robust(runs, splits, ("standard", None, seed))
            assert act >= standard + 0.20, (seed, act, standard)

    def test_act_matches_madry(self, runs, splits):
        """Test ACT within 5 points of Madry's robust accuracy."""
        for seed in SEEDS:
            act = _robust(runs, splits, ("act", 0.9, seed))
            madry = _robust(runs, splits, ("madry", None, seed))
            assert abs(act - madry) <= 0.05, (seed, act, madry)

    def test_alpha_trend(self, runs, splits):
        """Test robust accuracy nondecreasing in alpha in at least two of three seeds."""
        tally = 0
        for seed in SEEDS:
            curve = [_robust(runs, splits, ("act", alpha, seed)) for alpha in ALPHAS]
            tally += all(b >= a for a, b in zip(curve, curve[1:]))
        assert tally >= 2


class TestGradientObfuscation:
    """Checks that robustness does not come from masked gradients."""

    def test_epsilon_sweep_monotone(self, runs, splits):
        """Test accuracy falling with the radius and vanishing at a large one."""
        eps_list = (0.0, 0.05, 0.1, 0.2, 0.4)
        for seed in SEEDS:
            curve = epsilon_sweep(runs[("act", 0.9, seed)].robust, splits[1], eps_list, steps=20, cfg=ATTACK)
            accuracies = [acc for _, acc in curve]
            assert all(b <= a + 0.005 for a, b in zip(accuracies, accuracies[1:])), (seed, accuracies)
            assert accuracies[-1] <= 0.55

    def test_blackbox_weaker_than_whitebox(self, runs, splits):
        """Test transfer from the standard model against white-box attacks on ACT."""
        _, test_set = splits
        for seed in SEEDS:
            target = runs[("act", 0.9, seed)].robust
            surrogate = runs[("standard", None, seed)].robust
            blackbox = blackbox_transfer(surrogate, target, test_set, ATTACK).success_rate
            whitebox = whitebox_success_rate(target, test_set, ATTACK)
            assert blackbox <= whitebox + 0.01, (seed, blackbox, whitebox)


class TestEntropy:
    """Posterior entropy of the robust model."""

    def test_act_entropy_at_least_madry(self, runs, splits):
        """Test the tally of seeds where ACT's robust model is less confident than Madry's."""
        train_set, _ = splits
        tally = sum(
            entropy_report(runs[("act", 0.9, seed)].robust, train_set)
            >= entropy_report(runs[("madry", None, seed)].robust, train_set)
            for seed in SEEDS
        )
        assert tally >= 2

    def test_entropy_bounded(self, runs, splits):
        """Test that every model's mean entropy lies in [0, ln 2]."""
        for result in runs.values():
            assert 0.0 <= entropy_report(result.robust, splits[0]) <= np.log(2) + 1e-12
