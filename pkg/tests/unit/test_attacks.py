"""
Unit tests for L-infinity attacks: projection, PGD, FGSM, multi-restart
selection and minimum-perturbation bisection.
"""

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from act_lab.core.attacks import (
    UNBOUNDED,
    AttackBudget,
    AttackConfig,
    AttackConfigError,
    fgsm,
    min_perturbation,
    multi_restart_attack,
    pgd,
    project_linf,
)
from act_lab.core.models import ModelSpec, forward, init
from act_lab.core.objectives import (
    act_objective,
    cross_entropy_objective,
    per_example_cross_entropy,
    trades_objective,
)
from act_lab.core.tensor import ShapeError, Tensor
from act_lab.core.trainer import TrainPlan, train


def _linear_objective(c: np.ndarray):
    """<c, x + delta>, whose gradient in delta is c everywhere."""
    return lambda t: (t * Tensor(c)).sum()


def _assert_sound(delta: np.ndarray, x: np.ndarray, budget: AttackBudget) -> None:
    low, high = budget.clamp
    assert np.max(np.abs(delta), initial=0.0) <= budget.epsilon + 1e-9
    assert np.all(x + delta >= low - 1e-12)
    assert np.all(x + delta <= high + 1e-12)


def _binary_linear(make_linear, w: np.ndarray, b: float):
    """Class 1 iff w.x + b > 0 (exact ties go to class 0)."""
    weight = np.vstack([np.zeros_like(w), w])
    return make_linear(weight, np.array([0.0, b]))


class TestAttackConfig:
    """Test budget and configuration validation."""

    def test_defaults(self):
        """Test the training and evaluation presets."""
        training = AttackConfig.training()
        evaluation = AttackConfig.evaluation()
        assert (training.epsilon, training.steps, training.step_size) == (0.031, 10, 0.007)
        assert (evaluation.steps, evaluation.step_size, evaluation.restarts) == (20, 0.003, 5)
        assert training.random_init and evaluation.random_init

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epsilon": -0.1},
            {"epsilon": 0.1, "clamp": (1.0, 0.0)},
            {"epsilon": 0.1, "norm": "l2"},
        ],
    )
    def test_invalid_budget(self, kwargs):
        """Test negative radii, inverted clamps and unsupported norms."""
        with pytest.raises(AttackConfigError):
            AttackBudget(**kwargs)

    @pytest.mark.parametrize(
        "kwargs", [{"steps": -1}, {"restarts": 0}, {"step_size": 0.0}]
    )
    def test_invalid_config(self, kwargs):
        """Test negative steps, zero restarts and a zero step size."""
        with pytest.raises(AttackConfigError):
            AttackConfig(AttackBudget(0.1), **kwargs)

    def test_with_epsilon_and_seed(self):
        """Test the copy helpers."""
        cfg = AttackConfig.training().with_epsilon(0.2).with_seed(9)
        assert cfg.epsilon == 0.2
        assert cfg.seed == 9
        assert cfg.budget.clamp == (0.0, 1.0)


class TestProjectLinf:
    """Test projection into the budget."""

    def test_inside_unchanged(self):
        """Test that a feasible delta is returned unchanged."""
        x = np.full((2, 3), 0.5)
        delta = np.array([[0.01, -0.02, 0.0], [0.03, 0.0, -0.01]])
        assert np.array_equal(project_linf(delta, x, AttackBudget(0.05)), delta)

    def test_clips_to_ball(self):
        """Test that 2 eps everywhere becomes eps."""
        x = np.full((2, 2), 0.5)
        assert np.array_equal(project_linf(np.full((2, 2), 0.2), x, AttackBudget(0.1)), np.full((2, 2), 0.1))

    def test_upper_clamp(self):
        """Test that any positive delta at x = 1 projects to 0."""
        x = np.ones((1, 3))
        assert np.array_equal(project_linf(np.full((1, 3), 0.05), x, AttackBudget(0.1)), np.zeros((1, 3)))

    def test_lower_clamp_partial(self):
        """Test that a negative step near 0 stops at the pixel bound."""
        x = np.array([[0.02]])
        out = project_linf(np.array([[-0.05]]), x, AttackBudget(0.1))
        assert x[0, 0] + out[0, 0] == pytest.approx(0.0, abs=1e-15)

    def test_per_example_radius(self):
        """Test that a per-example epsilon vector overrides the budget."""
        x = np.full((2, 2), 0.5)
        out = project_linf(np.full((2, 2), 0.3), x, AttackBudget(0.1), epsilon=np.array([0.05, 0.2]))
        assert out[:, 0].tolist() == [0.05, 0.2]

    def test_shape_mismatch(self):
        """Test that delta and x must agree."""
        with pytest.raises(ShapeError):
            project_linf(np.zeros((2, 2)), np.zeros((2, 3)), AttackBudget(0.1))


class TestPGD:
    """Test projected sign-gradient ascent."""

    def test_zero_steps_no_init(self, rng):
        """Test that K=0 without a random start returns zero."""
        x = rng.uniform(size=(3, 2))
        cfg = AttackConfig(AttackBudget(0.1), steps=0, random_init=False)
        assert np.array_equal(pgd(_linear_objective(np.ones((3, 2))), x, cfg), np.zeros((3, 2)))

    def test_linear_objective_one_step(self, rng):
        """Test that one full step on <c, delta> lands exactly on eps * sign(c)."""
        c = rng.choice([-1.0, 1.0], size=(4, 3)) * rng.uniform(0.5, 2.0, size=(4, 3))
        x = rng.uniform(0.3, 0.7, size=(4, 3))
        cfg = AttackConfig(AttackBudget(0.1), steps=1, step_size=0.1, random_init=False)
        assert np.array_equal(pgd(_linear_objective(c), x, cfg), 0.1 * np.sign(c))

    def test_oversized_step(self, rng):
        """Test that a step larger than eps is projected back onto the ball."""
        c = rng.standard_normal((2, 5))
        x = np.full((2, 5), 0.5)
        cfg = AttackConfig(AttackBudget(0.05), steps=1, step_size=0.3, random_init=False)
        assert np.array_equal(pgd(_linear_objective(c), x, cfg), 0.05 * np.sign(c))

    def test_deterministic_given_seed(self, tiny_model, toy_train, small_attack):
        """Test bit-identical results for a fixed seed and different ones otherwise."""
        objective = cross_entropy_objective(toy_train.labels)
        frozen = tiny_model.frozen()

        def run(cfg):
            return pgd(lambda t: objective(frozen.logits(t)).sum(), toy_train.inputs, cfg)

        assert np.array_equal(run(small_attack), run(small_attack))
        assert not np.array_equal(run(small_attack), run(small_attack.with_seed(1)))

    def test_random_start_depends_on_example_id(self, small_attack):
        """Test that random starts follow example ids, not batch positions."""
        x = np.full((2, 3), 0.5)
        cfg = replace(small_attack, steps=0)
        objective = _linear_objective(np.ones((2, 3)))
        forward_ids = pgd(objective, x, cfg, example_ids=np.array([10, 20]))
        swapped = pgd(objective, x, cfg, example_ids=np.array([20, 10]))
        assert np.array_equal(forward_ids[0], swapped[1])
        assert np.array_equal(forward_ids[1], swapped[0])

    def test_objective_does_not_decrease(self, toy_train):
        """Test objective(x + delta) >= objective(x) on a trained toy model without random start."""
        plan = TrainPlan(
            method="standard",
            model=ModelSpec.mlp((2, 8, 8, 2)),
            epochs=5,
            batch_size=16,
            lr=0.05,
            lr_milestones=(),
        )
        model = train(plan, toy_train, seed=0).robust.frozen()
        objective = cross_entropy_objective(toy_train.labels)
        cfg = AttackConfig(AttackBudget(0.05), steps=10, step_size=0.01, random_init=False)
        delta = pgd(lambda t: objective(model.logits(t)).sum(), toy_train.inputs, cfg)

        clean = objective(model.logits(toy_train.inputs)).data
        attacked = objective(model.logits(toy_train.inputs + delta)).data
        assert np.mean(attacked >= clean - 1e-12) >= 0.99

    def test_arbitrary_objectives_sound(self, tiny_model, toy_train, small_attack):
        """Test budget soundness for the concurrent and TRADES objectives."""
        frozen = tiny_model.frozen()
        x, y = toy_train.inputs, toy_train.labels
        reference = frozen.logits(x).data
        for per_example in (act_objective(reference * 0.5, y, 0.9), trades_objective(reference)):
            delta = pgd(lambda t: per_example(frozen.logits(t)).sum(), x, small_attack)
            _assert_sound(delta, x, small_attack.budget)


class TestBudgetSoundness:
    """Every returned perturbation respects the radius and the pixel range."""

    @given(
        seed=st.integers(0, 2**31 - 1),
        epsilon=st.floats(0.0, 0.5),
        steps=st.integers(0, 6),
        step_size=st.floats(1e-4, 0.6),
        random_init=st.booleans(),
    )
    @settings(max_examples=80, deadline=None)
    def test_pgd_sound(self, seed, epsilon, steps, step_size, random_init):
        """Test 128 attacked examples per draw, a third sitting on the pixel bounds."""
        rng = np.random.default_rng(seed)
        spec = ModelSpec.mlp((3, 6, 3))
        params = init(spec, seed % 1000)
        x = rng.uniform(size=(128, 3))
        x[rng.random((128, 3)) < 0.33] = rng.choice([0.0, 1.0])
        y = rng.integers(0, 3, size=128)
        objective = cross_entropy_objective(y)
        budget = AttackBudget(epsilon)
        cfg = AttackConfig(budget, steps=steps, step_size=step_size, random_init=random_init, seed=seed)
        delta = pgd(lambda t: objective(forward(params, spec, t)).sum(), x, cfg)
        _assert_sound(delta, x, budget)

    def test_multi_restart_sound(self, tiny_model, toy_test):
        """Test the selected worst case over restarts."""
        cfg = AttackConfig(AttackBudget(0.1), steps=4, step_size=0.05, restarts=3)
        result = multi_restart_attack(tiny_model.frozen().logits, toy_test.inputs, toy_test.labels, cfg)
        _assert_sound(result.delta, toy_test.inputs, cfg.budget)
        assert np.array_equal(result.x_adv, toy_test.inputs + result.delta)

    def test_custom_clamp(self, rng):
        """Test a non-default pixel range."""
        x = rng.uniform(0.2, 0.4, size=(20, 4))
        budget = AttackBudget(0.3, clamp=(0.1, 0.5))
        cfg = AttackConfig(budget, steps=3, step_size=0.2, seed=3)
        delta = pgd(_linear_objective(rng.standard_normal((20, 4))), x, cfg)
        _assert_sound(delta, x, budget)


class TestFGSM:
    """Test the single-step attack."""

    def test_zero_radius(self, rng):
        """Test that eps = 0 gives no perturbation."""
        x = rng.uniform(size=(2, 3))
        assert np.array_equal(fgsm(_linear_objective(np.ones((2, 3))), x, AttackBudget(0.0)), np.zeros((2, 3)))

    def test_linear_objective(self, rng):
        """Test the full signed step on a linear objective."""
        c = rng.choice([-1.0, 1.0], size=(3, 2))
        x = np.full((3, 2), 0.5)
        assert np.array_equal(fgsm(_linear_objective(c), x, AttackBudget(0.08)), 0.08 * c)


class TestMultiRestartAttack:
    """Test worst-case selection across restarts."""

    def test_single_restart_is_pgd(self, tiny_model, toy_test, small_attack):
        """Test that restarts=1 returns the random-start PGD perturbation."""
        cfg = replace(small_attack, restarts=1)
        frozen = tiny_model.frozen()
        objective = cross_entropy_objective(toy_test.labels)
        expected = pgd(lambda t: objective(frozen.logits(t)).sum(), toy_test.inputs, cfg)
        result = multi_restart_attack(frozen.logits, toy_test.inputs, toy_test.labels, cfg)
        assert np.array_equal(result.delta, expected)

    def test_more_restarts_flip_superset(self, tiny_model, toy_test):
        """Test that extra restarts can only add flipped examples."""
        base = AttackConfig(AttackBudget(0.1), steps=5, step_size=0.03, restarts=1)
        frozen = tiny_model.frozen()
        one = multi_restart_attack(frozen.logits, toy_test.inputs, toy_test.labels, base)
        five = multi_restart_attack(
            frozen.logits, toy_test.inputs, toy_test.labels, replace(base, restarts=5)
        )
        assert np.all(five.flipped[one.flipped])
        assert five.flipped.sum() >= one.flipped.sum()

    def test_flipping_restart_preferred(self, make_linear):
        """Test that a flipping restart beats a higher-objective non-flipping one."""
        model = make_linear(np.eye(2), np.zeros(2))
        x = np.array([[0.5, 0.48]])
        y = np.array([0])

        # log p_y: every flip scores lower than every non-flip
        def keep_label(labels):
            return lambda logits: -per_example_cross_entropy(logits, labels)

        cfg = AttackConfig(AttackBudget(0.1), steps=0, random_init=True, restarts=8, seed=0)
        starts = [pgd(lambda t: t.sum(), x, cfg, restart=r) for r in range(cfg.restarts)]
        any_flip = any(model.predict(x + d)[0] != 0 for d in starts)

        result = multi_restart_attack(model.logits, x, y, cfg, objective_builder=keep_label)
        assert result.flipped[0] == any_flip
        assert (model.predict(result.x_adv)[0] != 0) == any_flip

    def test_objective_values_reported(self, tiny_model, toy_test, small_attack):
        """Test that the reported objective matches the selected perturbation."""
        frozen = tiny_model.frozen()
        result = multi_restart_attack(frozen.logits, toy_test.inputs, toy_test.labels, small_attack)
        recomputed = cross_entropy_objective(toy_test.labels)(frozen.logits(result.x_adv)).data
        assert np.allclose(result.objective, recomputed, atol=1e-12)


class TestMinPerturbation:
    """Test per-example minimum radii by bisection."""

    W = np.array([1.0, -2.0])
    B = 0.5

    def _points(self, model, rng, n=12):
        x = rng.uniform(0.4, 0.6, size=(n, 2))
        y = model.predict(x)
        margin = np.abs(x @ self.W + self.B)
        return x, y, margin

    def test_linear_closed_form(self, make_linear, rng):
        """Test eps* = m / ||w||_1 within tol on a linear binary classifier."""
        model = _binary_linear(make_linear, self.W, self.B)
        x, y, margin = self._points(model, rng)
        cfg = AttackConfig(AttackBudget(0.1), steps=10, step_size=0.01)
        result = min_perturbation(model.logits, x, y, 1e-3, 0.25, cfg)
        expected = margin / np.abs(self.W).sum()
        assert np.all(np.abs(result.epsilon - expected) <= 1e-3)

    def test_misclassified_is_zero(self, make_linear):
        """Test that a wrong clean prediction reports 0."""
        model = _binary_linear(make_linear, self.W, self.B)
        x = np.array([[0.5, 0.5]])
        wrong = 1 - model.predict(x)
        cfg = AttackConfig(AttackBudget(0.1), steps=5, step_size=0.01)
        assert min_perturbation(model.logits, x, wrong, 1e-3, 0.25, cfg).epsilon[0] == 0.0

    def test_unbounded_marker(self, make_linear, rng):
        """Test that examples surviving eps_hi are reported as unbounded."""
        model = _binary_linear(make_linear, self.W, self.B)
        x, y, margin = self._points(model, rng)
        cfg = AttackConfig(AttackBudget(0.1), steps=5, step_size=0.01)
        result = min_perturbation(model.logits, x, y, 1e-3, 0.01, cfg)
        far = margin / 3.0 > 0.011
        assert np.all(result.epsilon[far] == UNBOUNDED)
        assert np.all(result.lower[far] == 0.01)

    def test_tolerance_controls_width(self, make_linear, rng):
        """Test that halving tol halves the reported bracket bound."""
        model = _binary_linear(make_linear, self.W, self.B)
        x, y, _ = self._points(model, rng)
        cfg = AttackConfig(AttackBudget(0.1), steps=10, step_size=0.01)
        coarse = min_perturbation(model.logits, x, y, 2e-3, 0.25, cfg)
        fine = min_perturbation(model.logits, x, y, 1e-3, 0.25, cfg)
        assert np.all(coarse.width[np.isfinite(coarse.epsilon)] <= 2e-3)
        assert np.all(fine.width[np.isfinite(fine.epsilon)] <= 1e-3)

    def test_matches_grid_oracle(self, make_linear, rng):
        """Test bisection against an exhaustive radius grid of pitch tol / 4."""
        tol, eps_hi = 0.01, 0.3
        pitch = tol / 4
        model = _binary_linear(make_linear, np.array([-0.7, 1.3]), -0.3)
        x = rng.uniform(0.4, 0.6, size=(8, 2))
        y = model.predict(x)
        cfg = AttackConfig(AttackBudget(0.1), steps=10, step_size=0.01, random_init=False)
        result = min_perturbation(model.logits, x, y, tol, eps_hi, cfg)

        grid = np.arange(1, int(round(eps_hi / pitch)) + 1) * pitch
        objective = cross_entropy_objective(y)
        first_success = np.full(len(y), UNBOUNDED)
        for eps in grid[::-1]:
            step_cfg = replace(cfg.with_epsilon(float(eps)), step_size=2.5 * float(eps) / cfg.steps)
            delta = pgd(lambda t: objective(model.logits(t)).sum(), x, step_cfg)
            first_success[model.predict(x + delta) != y] = eps

        assert np.all(np.isfinite(first_success))
        assert np.all(np.abs(result.epsilon - first_success) <= tol + pitch)

    def test_invalid_arguments(self, make_linear):
        """Test that tol and eps_hi must be positive and K >= 1."""
        model = _binary_linear(make_linear, self.W, self.B)
        x, y = np.array([[0.5, 0.5]]), np.array([0])
        cfg = AttackConfig(AttackBudget(0.1), steps=5, step_size=0.01)
        with pytest.raises(AttackConfigError):
            min_perturbation(model.logits, x, y, 0.0, 0.25, cfg)
        with pytest.raises(AttackConfigError):
            min_perturbation(model.logits, x, y, 1e-3, 0.25, replace(cfg, steps=0))
