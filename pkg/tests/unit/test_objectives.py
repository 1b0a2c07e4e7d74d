"""
Unit tests for training objectives: cross-entropy, KL mimicry, the concurrent
losses, the Madry and TRADES baselines and posterior entropy.
"""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from act_lab.core.objectives import (
    LabelError,
    MixWeight,
    MixWeightError,
    act_loss_F,
    act_loss_G,
    act_objective,
    cross_entropy,
    cross_entropy_objective,
    kl_divergence,
    madry_loss,
    per_example_kl,
    posterior_entropy,
    trades_loss,
    trades_objective,
)
from act_lab.core.tensor import Tensor, backward, finite_diff_check

logit_rows = arrays(
    np.float64,
    st.tuples(st.integers(1, 6), st.integers(2, 6)),
    elements=st.floats(-30.0, 30.0, allow_nan=False, allow_infinity=False),
)


def _log_probs(logits: np.ndarray) -> np.ndarray:
    """Direct oracle: x - log(sum(exp(x))) with a per-row shift."""
    top = logits.max(axis=1, keepdims=True)
    return logits - (top + np.log(np.sum(np.exp(logits - top), axis=1, keepdims=True)))


def _ce(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(-np.mean(_log_probs(logits)[np.arange(len(labels)), labels]))


def _kl(ref: np.ndarray, learner: np.ndarray) -> float:
    log_p, log_q = _log_probs(ref), _log_probs(learner)
    return float(np.mean(np.sum(np.exp(log_p) * (log_p - log_q), axis=1)))


class TestCrossEntropy:
    """Test mean cross-entropy."""

    def test_uniform_logits(self):
        """Test that uniform logits over 10 classes give ln 10."""
        loss = cross_entropy(Tensor(np.zeros((4, 10))), np.array([0, 3, 5, 9]))
        assert loss.total == pytest.approx(math.log(10), abs=1e-12)

    def test_decreasing_in_margin(self):
        """Test that a growing correct-class margin drives the loss toward 0."""
        values = [cross_entropy(Tensor([[m, 0.0]]), np.array([0])).total for m in range(0, 40, 4)]
        assert all(b < a for a, b in zip(values, values[1:]))
        assert values[-1] < 1e-15

    def test_matches_direct_computation(self, rng):
        """Test a random 8x5 batch against the direct oracle."""
        logits = rng.standard_normal((8, 5)) * 3
        labels = rng.integers(0, 5, size=8)
        assert abs(cross_entropy(Tensor(logits), labels).total - _ce(logits, labels)) < 1e-12

    def test_label_out_of_range(self):
        """Test labels at or above C are rejected."""
        with pytest.raises(LabelError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(LabelError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([-1, 0]))

    def test_label_count_mismatch(self):
        """Test one label per row is required."""
        with pytest.raises(LabelError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 1, 2]))

    def test_gradient(self, rng):
        """Test the logits gradient against finite differences."""
        labels = np.array([1, 0, 2])
        assert finite_diff_check(
            lambda t: cross_entropy(t, labels).value, rng.standard_normal((3, 3))
        ) < 1e-4


class TestKLDivergence:
    """Test the mimicry divergence."""

    def test_identical_logits(self, rng):
        """Test D(p || p) = 0."""
        logits = rng.standard_normal((5, 4))
        assert kl_divergence(Tensor(logits), Tensor(logits.copy())).total == 0.0

    def test_closed_form(self):
        """Test p_ref = (0.9, 0.1) against the uniform learner."""
        ref = Tensor([[math.log(0.9), math.log(0.1)]])
        expected = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
        assert kl_divergence(ref, Tensor(np.zeros((1, 2)))).total == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.368, abs=1e-3)

    def test_nonnegative_on_random_pairs(self, rng):
        """Test Gibbs' inequality on 1000 random logit pairs."""
        ref = rng.standard_normal((1000, 5)) * 4
        learner = rng.standard_normal((1000, 5)) * 4
        assert np.all(per_example_kl(Tensor(ref), Tensor(learner)).data >= -1e-12)

    @given(logit_rows, st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative_property(self, ref, seed):
        """Test KL >= 0 for arbitrary reference rows against random learners."""
        learner = np.random.default_rng(seed).uniform(-30, 30, size=ref.shape)
        assert kl_divergence(Tensor(ref), Tensor(learner)).total >= -1e-12

    def test_matches_direct_computation(self, rng):
        """Test random logits against the direct oracle."""
        ref, learner = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        assert abs(kl_divergence(Tensor(ref), Tensor(learner)).total - _kl(ref, learner)) < 1e-12

    def test_shape_mismatch(self):
        """Test that reference and learner must have the same shape."""
        with pytest.raises(ValueError, match="shape"):
            kl_divergence(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))

    def test_reference_receives_no_gradient(self, rng):
        """Test that the reference slot is a constant."""
        ref = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        learner = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        g_ref, g_learner = backward(kl_divergence(ref, learner).value, [ref, learner])
        assert np.array_equal(g_ref, np.zeros((3, 4)))

        detached = Tensor(learner.data, requires_grad=True)
        (oracle,) = backward(kl_divergence(Tensor(ref.data), detached).value, [detached])
        assert np.array_equal(g_learner, oracle)

    def test_learner_gradient(self, rng):
        """Test the learner-side gradient against finite differences."""
        ref = Tensor(rng.standard_normal((3, 4)))
        assert finite_diff_check(lambda t: kl_divergence(ref, t).value, rng.standard_normal((3, 4))) < 1e-4


class TestMixWeight:
    """Test the convex mixing weight."""

    @pytest.mark.parametrize("alpha", [0.0, 0.5, 1.0])
    def test_accepts_unit_interval(self, alpha):
        """Test that alpha in [0, 1] is accepted."""
        assert MixWeight(alpha).alpha == alpha

    @pytest.mark.parametrize("alpha", [-0.01, 1.01])
    def test_rejects_outside(self, alpha):
        """Test that alpha outside [0, 1] is rejected."""
        with pytest.raises(MixWeightError):
            MixWeight(alpha)


class TestActLossG:
    """Test the robust-model loss."""

    def test_alpha_zero_is_cross_entropy(self, rng):
        """Test that alpha=0 reduces exactly to CE on the adversarial logits."""
        g, f = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        y = rng.integers(0, 3, size=5)
        assert act_loss_G(Tensor(g), Tensor(f), y, 0.0).total == cross_entropy(Tensor(g), y).total

    def test_alpha_one_is_kl(self, rng):
        """Test that alpha=1 reduces exactly to KL(F || G)."""
        g, f = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        y = rng.integers(0, 3, size=5)
        assert act_loss_G(Tensor(g), Tensor(f), y, 1.0).total == kl_divergence(Tensor(f), Tensor(g)).total

    def test_alpha_half(self, rng):
        """Test alpha=0.5 against the hand-computed mean of both terms."""
        g, f = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        y = np.array([0, 1, 2, 1])
        expected = 0.5 * _ce(g, y) + 0.5 * _kl(f, g)
        assert abs(act_loss_G(Tensor(g), Tensor(f), y, 0.5).total - expected) < 1e-12

    def test_agrees_with_madry_at_alpha_zero(self, rng):
        """Test bit-exact agreement of value and gradient with the Madry loss."""
        g, f = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
        y = rng.integers(0, 4, size=6)
        leaf_a, leaf_b = Tensor(g, requires_grad=True), Tensor(g, requires_grad=True)
        act = act_loss_G(leaf_a, Tensor(f), y, 0.0)
        madry = madry_loss(leaf_b, y)
        assert act.total == madry.total
        assert np.array_equal(backward(act.value, [leaf_a])[0], backward(madry.value, [leaf_b])[0])

    def test_natural_logits_get_no_gradient(self, rng):
        """Test that F's distribution is a constant in the robust loss."""
        g = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        f = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        _, g_f = backward(act_loss_G(g, f, np.array([0, 1, 2]), 0.7).value, [g, f])
        assert np.array_equal(g_f, np.zeros((3, 3)))

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 0.9, 1.0])
    def test_decomposition_and_convexity(self, alpha, rng):
        """Test that the terms sum to the total and the total lies between the raw terms."""
        g, f = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        y = rng.integers(0, 4, size=5)
        loss = act_loss_G(Tensor(g), Tensor(f), y, alpha)
        assert abs(sum(loss.terms.values()) - loss.total) < 1e-10
        ce, kl = _ce(g, y), _kl(f, g)
        assert min(ce, kl) - 1e-12 <= loss.total <= max(ce, kl) + 1e-12
        assert loss.total >= 0.0

    def test_gradient(self, rng):
        """Test the adversarial-logits gradient against finite differences."""
        f = Tensor(rng.standard_normal((3, 4)))
        y = np.array([3, 0, 1])
        assert finite_diff_check(lambda t: act_loss_G(t, f, y, 0.9).value, rng.standard_normal((3, 4))) < 1e-4

    def test_invalid_alpha(self):
        """Test that alpha is validated."""
        with pytest.raises(MixWeightError):
            act_loss_G(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), np.array([0]), 1.5)


class TestActLossF:
    """Test the natural-model loss."""

    def test_alpha_zero_is_natural_training(self, rng):
        """Test that alpha=0 reduces to CE on the clean logits."""
        f, g = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        y = rng.integers(0, 3, size=4)
        assert act_loss_F(Tensor(f), Tensor(g), y, 0.0).total == cross_entropy(Tensor(f), y).total

    def test_identical_logits_zero_mimicry(self, rng):
        """Test that matching distributions leave only the weighted task term."""
        logits = rng.standard_normal((4, 3))
        y = rng.integers(0, 3, size=4)
        loss = act_loss_F(Tensor(logits), Tensor(logits.copy()), y, 0.4)
        assert loss.terms["mimicry"] == 0.0
        assert loss.total == pytest.approx(0.6 * _ce(logits, y), abs=1e-12)

    def test_alpha_point_nine(self, rng):
        """Test alpha=0.9 against direct computation."""
        f, g = rng.standard_normal((6, 5)), rng.standard_normal((6, 5))
        y = rng.integers(0, 5, size=6)
        expected = 0.1 * _ce(f, y) + 0.9 * _kl(g, f)
        assert abs(act_loss_F(Tensor(f), Tensor(g), y, 0.9).total - expected) < 1e-12

    def test_robust_logits_get_no_gradient(self, rng):
        """Test that G's distribution is a constant in the natural loss."""
        f = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        g = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        g_f, g_g = backward(act_loss_F(f, g, np.array([0, 1, 2]), 0.7).value, [f, g])
        assert np.array_equal(g_g, np.zeros((3, 3)))
        assert np.any(g_f != 0)

    def test_gradient(self, rng):
        """Test the clean-logits gradient against finite differences."""
        g = Tensor(rng.standard_normal((3, 4)))
        y = np.array([1, 1, 2])
        assert finite_diff_check(lambda t: act_loss_F(t, g, y, 0.6).value, rng.standard_normal((3, 4))) < 1e-4


class TestMadryLoss:
    """Test the adversarial cross-entropy baseline."""

    def test_uniform(self):
        """Test uniform adversarial logits give ln 10."""
        assert madry_loss(Tensor(np.zeros((2, 10))), np.array([1, 2])).total == pytest.approx(
            math.log(10), abs=1e-12
        )

    def test_direct(self, rng):
        """Test against the direct oracle."""
        logits = rng.standard_normal((8, 5))
        y = rng.integers(0, 5, size=8)
        assert abs(madry_loss(Tensor(logits), y).total - _ce(logits, y)) < 1e-12

    def test_gradient(self, rng):
        """Test the adversarial-logits gradient against finite differences."""
        y = np.array([0, 2])
        assert finite_diff_check(lambda t: madry_loss(t, y).value, rng.standard_normal((2, 3))) < 1e-4


class TestTradesLoss:
    """Test the TRADES baseline."""

    def test_adv_equals_clean(self, rng):
        """Test that identical logits reduce to CE on the clean logits."""
        logits = rng.standard_normal((4, 3))
        y = rng.integers(0, 3, size=4)
        loss = trades_loss(Tensor(logits), Tensor(logits.copy()), y, 5.0)
        assert loss.total == cross_entropy(Tensor(logits), y).total

    def test_inv_lambda_zero(self, rng):
        """Test that inv_lambda=0 is standard training."""
        clean, adv = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        y = rng.integers(0, 3, size=4)
        assert trades_loss(Tensor(clean), Tensor(adv), y, 0.0).total == cross_entropy(Tensor(clean), y).total

    def test_inv_lambda_five(self, rng):
        """Test inv_lambda=5 against direct computation."""
        clean, adv = rng.standard_normal((5, 4)), rng.standard_normal((5, 4))
        y = rng.integers(0, 4, size=5)
        expected = _ce(clean, y) + 5.0 * _kl(clean, adv)
        loss = trades_loss(Tensor(clean), Tensor(adv), y, 5.0)
        assert abs(loss.total - expected) < 1e-12
        assert abs(loss.terms["task"] + loss.terms["robust"] - loss.total) < 1e-10

    def test_negative_weight(self):
        """Test that a negative robustness weight is rejected."""
        with pytest.raises(ValueError):
            trades_loss(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))), np.array([0]), -1.0)

    def test_gradient(self, rng):
        """Test the adversarial-logits gradient with the clean logits held fixed."""
        clean = Tensor(rng.standard_normal((3, 3)))
        y = np.array([0, 1, 2])
        assert finite_diff_check(
            lambda t: trades_loss(clean, t, y, 5.0).value, rng.standard_normal((3, 3))
        ) < 1e-4

    def test_clean_slot_gradient_is_cross_entropy_only(self, rng):
        """Test that the KL reference slot contributes no gradient."""
        clean = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        adv = Tensor(rng.standard_normal((3, 3)))
        y = np.array([2, 1, 0])
        (grad,) = backward(trades_loss(clean, adv, y, 5.0).value, [clean])
        plain = Tensor(clean.data, requires_grad=True)
        (oracle,) = backward(cross_entropy(plain, y).value, [plain])
        assert np.allclose(grad, oracle, atol=1e-15)


class TestPosteriorEntropy:
    """Test mean predictive entropy."""

    def test_uniform_is_maximal(self):
        """Test that a uniform distribution over 10 classes has entropy ln 10."""
        assert posterior_entropy(np.zeros((3, 10))) == pytest.approx(math.log(10), abs=1e-12)

    def test_near_one_hot(self):
        """Test that a confident prediction has entropy near 0."""
        assert posterior_entropy(np.array([[50.0, 0.0, 0.0]])) < 1e-18

    def test_bound_on_random_rows(self, rng):
        """Test 0 <= H <= ln C for 1000 random rows."""
        logits = rng.standard_normal((1000, 6)) * 5
        for row in logits:
            h = posterior_entropy(row[None, :])
            assert -1e-12 <= h <= math.log(6) + 1e-12

    @given(logit_rows)
    @settings(max_examples=60, deadline=None)
    def test_bound_property(self, logits):
        """Test the entropy bound for arbitrary logit rows."""
        assert posterior_entropy(logits) <= math.log(logits.shape[1]) + 1e-12

    def test_accepts_tensors(self):
        """Test that tape tensors are accepted as well as arrays."""
        assert posterior_entropy(Tensor(np.zeros((1, 2)))) == pytest.approx(math.log(2))


class TestAttackObjectives:
    """Test the per-example objectives handed to PGD."""

    def test_cross_entropy_objective(self, rng):
        """Test one value per example that averages to the mean loss."""
        logits = rng.standard_normal((4, 3))
        y = rng.integers(0, 3, size=4)
        values = cross_entropy_objective(y)(Tensor(logits))
        assert values.shape == (4,)
        assert np.mean(values.data) == pytest.approx(_ce(logits, y), abs=1e-12)

    def test_act_objective_at_alpha_zero(self, rng):
        """Test that the concurrent objective at alpha=0 matches cross-entropy exactly."""
        logits, f = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        y = rng.integers(0, 3, size=4)
        assert np.array_equal(
            act_objective(f, y, 0.0)(Tensor(logits)).data,
            cross_entropy_objective(y)(Tensor(logits)).data,
        )

    def test_act_objective_matches_loss(self, rng):
        """Test that the per-example objective averages to the robust loss."""
        logits, f = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        y = rng.integers(0, 3, size=5)
        per_example = act_objective(f, y, 0.9)(Tensor(logits)).data
        assert np.mean(per_example) == pytest.approx(
            act_loss_G(Tensor(logits), Tensor(f), y, 0.9).total, abs=1e-12
        )

    def test_trades_objective_zero_at_clean(self, rng):
        """Test that the KL objective vanishes at the clean logits."""
        clean = rng.standard_normal((3, 4))
        assert np.array_equal(trades_objective(clean)(Tensor(clean.copy())).data, np.zeros(3))
