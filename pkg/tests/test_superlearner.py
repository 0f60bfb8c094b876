"""Stacked ensemble: simplex weights, CV dominance, fold handling."""

import numpy as np
import pytest
from scipy.optimize import minimize

from attbench.errors import OneClassError
from attbench.numeric import RngStream
from attbench.superlearner import (
    EnsembleFit,
    LearnerSpec,
    expand_degree2,
    fit_superlearner,
    predict_ensemble,
    simplex_weights,
)


class TestDegree2Expansion:
    def test_feature_count(self, np_rng):
        for d in (1, 2, 3, 5):
            x = np_rng.standard_normal((7, d))
            assert expand_degree2(x).shape == (7, 2 * d + d * (d - 1) // 2)

    def test_column_content(self):
        x = np.array([[1.0, 2.0, 3.0]])
        expanded = expand_degree2(x)
        np.testing.assert_allclose(
            expanded[0], [1, 2, 3, 1, 4, 9, 2, 3, 6]
        )


class TestSimplexWeights:
    def test_single_column_gets_unit_weight(self, np_rng):
        z = np_rng.standard_normal((30, 1))
        w, obj = simplex_weights(z, z[:, 0])
        assert w == pytest.approx([1.0])
        assert obj == pytest.approx(0.0, abs=1e-12)

    def test_perfect_column_dominates(self, np_rng):
        y = np_rng.standard_normal(50)
        z = np.column_stack([y, y + np_rng.standard_normal(50)])
        w, obj = simplex_weights(z, y)
        np.testing.assert_allclose(w, [1.0, 0.0], atol=1e-9)
        assert obj == 0.0

    def test_valid_simplex_point(self, np_rng):
        for _ in range(30):
            k = int(np_rng.integers(1, 5))
            z = np_rng.standard_normal((40, k))
            w, _ = simplex_weights(z, np_rng.standard_normal(40))
            assert np.all(w >= 0)
            assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_matches_constrained_optimizer(self, np_rng):
        for _ in range(10):
            z = np_rng.standard_normal((60, 3))
            y = np_rng.standard_normal(60)
            w, obj = simplex_weights(z, y)

            def objective(v):
                r = z @ v - y
                return float(r @ r) / 60

            oracle = minimize(
                objective,
                np.full(3, 1 / 3),
                method="SLSQP",
                bounds=[(0, 1)] * 3,
                constraints=[{"type": "eq", "fun": lambda v: v.sum() - 1}],
            )
            assert obj <= oracle.fun + 1e-8
            assert obj == pytest.approx(objective(w), abs=1e-12)

    def test_noise_column_never_hurts(self, np_rng):
        for _ in range(20):
            z = np_rng.standard_normal((40, 2))
            y = np_rng.standard_normal(40)
            _, obj_small = simplex_weights(z, y)
            noisy = np.column_stack([z, np_rng.standard_normal(40)])
            _, obj_big = simplex_weights(noisy, y)
            assert obj_big <= obj_small + 1e-12

    def test_duplicated_column_leaves_predictions_invariant(self, np_rng):
        z = np_rng.standard_normal((50, 2))
        y = 0.7 * z[:, 0] + 0.3 * z[:, 1] + 0.1 * np_rng.standard_normal(50)
        w_base, obj_base = simplex_weights(z, y)
        dup = np.column_stack([z, z[:, 1]])
        w_dup, obj_dup = simplex_weights(dup, y)
        assert obj_dup == pytest.approx(obj_base, abs=1e-10)
        np.testing.assert_allclose(dup @ w_dup, z @ w_base, atol=1e-8)


class TestFitSuperlearner:
    def test_cv_objective_dominates_every_learner(self, np_rng):
        for trial in range(5):
            x = np_rng.standard_normal((120, 3))
            y = x[:, 0] + 0.5 * x[:, 1] ** 2 + np_rng.standard_normal(120)
            fit = fit_superlearner(x, y, "gaussian", rng=RngStream(trial))
            assert fit.cv_objective <= fit.cv_risks.min() + 1e-10

    def test_quadratic_truth_prefers_degree2(self, np_rng):
        x = np_rng.standard_normal((400, 2))
        y = 1.75 * x[:, 0] ** 2 + 0.3 * np_rng.standard_normal(400)
        fit = fit_superlearner(x, y, "gaussian", rng=RngStream(3))
        main_effects_risk = fit.cv_risks[1]
        assert fit.cv_objective <= main_effects_risk + 1e-10
        assert fit.weights[2] > 0.5

    def test_mean_only_learner_predicts_grand_mean(self, np_rng):
        x = np_rng.standard_normal((60, 2))
        y = np_rng.standard_normal(60) + 4.0
        fit = fit_superlearner(x, y, "gaussian", rng=RngStream(1))
        preds = fit.learners[0].predict(x)
        np.testing.assert_allclose(preds, np.full(60, y.mean()), atol=1e-10)

    def test_deterministic_given_stream(self, np_rng):
        x = np_rng.standard_normal((80, 3))
        y = x[:, 0] + np_rng.standard_normal(80)
        a = fit_superlearner(x, y, "gaussian", rng=RngStream(7))
        b = fit_superlearner(x, y, "gaussian", rng=RngStream(7))
        np.testing.assert_array_equal(a.weights, b.weights)
        np.testing.assert_array_equal(a.fold_assignment, b.fold_assignment)
        np.testing.assert_array_equal(a.cv_risks, b.cv_risks)

    def test_binomial_predictions_stay_inside_unit_interval(self, np_rng):
        x = np_rng.standard_normal((150, 3))
        z = (np_rng.random(150) < 0.3).astype(float)
        fit = fit_superlearner(x, z, "binomial", rng=RngStream(2))
        preds = predict_ensemble(fit, x)
        assert preds.min() > 0.0
        assert preds.max() < 1.0

    def test_single_class_raises(self, np_rng):
        x = np_rng.standard_normal((40, 2))
        with pytest.raises(OneClassError):
            fit_superlearner(x, np.zeros(40), "binomial", rng=RngStream(0))

    def test_lone_positive_fails_even_after_refold(self, np_rng):
        # One positive unit leaves its training folds single-class under
        # every possible fold assignment, so the refold cannot help.
        x = np_rng.standard_normal((24, 2))
        z = np.zeros(24)
        z[5] = 1.0
        with pytest.raises(OneClassError):
            fit_superlearner(x, z, "binomial", rng=RngStream(0))

    def test_too_small_sample_rejected(self, np_rng):
        x = np_rng.standard_normal((19, 2))
        with pytest.raises(ValueError):
            fit_superlearner(x, np.zeros(19), "gaussian", rng=RngStream(0))

    def test_predict_checks_feature_count(self, np_rng):
        x = np_rng.standard_normal((60, 2))
        fit = fit_superlearner(x, np_rng.standard_normal(60), "gaussian", rng=RngStream(0))
        with pytest.raises(ValueError):
            predict_ensemble(fit, np.ones((5, 3)))

    def test_learner_spec_validation(self):
        with pytest.raises(ValueError):
            LearnerSpec("spline", "gaussian")
        with pytest.raises(ValueError):
            LearnerSpec("mean_only", "poisson")
