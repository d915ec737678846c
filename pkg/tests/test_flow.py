import math

import numpy as np
import pytest

from core.errors import NumericError, ShapeError
from core.flow import (CategoricalParams, GaussianParams, NoisySample, categorical_flow, categorical_update,
                       gaussian_flow, gaussian_update)
from core.schedule import AccuracySchedule, beta, step_alphas


class TestParams:
    def test_gaussian_rejects_non_positive_precision(self):
        with pytest.raises(NumericError):
            GaussianParams(np.zeros(2), np.array([1.0, 0.0]))

    def test_gaussian_rejects_shape_mismatch(self):
        with pytest.raises(ShapeError):
            GaussianParams(np.zeros(2), np.ones(3))

    def test_categorical_rejects_non_simplex(self):
        with pytest.raises(NumericError):
            CategoricalParams(np.array([[0.6, 0.6]]))

    def test_categorical_rejects_single_class(self):
        with pytest.raises(ShapeError):
            CategoricalParams(np.array([[1.0]]))


class TestGaussianUpdate:
    @pytest.mark.parametrize("mu, rho, y, expected_mu, expected_rho", [
        (0.0, 1.0, 2.0, 1.0, 2.0),
        (1.0, 3.0, -1.0, 0.5, 4.0),
    ])
    def test_conjugate_update(self, mu, rho, y, expected_mu, expected_rho):
        posterior = gaussian_update(GaussianParams(np.array([mu]), np.array([rho])), NoisySample(np.array([y]), 1.0))
        assert posterior.mean[0] == pytest.approx(expected_mu)
        assert posterior.precision[0] == pytest.approx(expected_rho)

    def test_vanishing_accuracy_leaves_prior(self):
        prior = GaussianParams(np.array([0.3, -0.2]), np.array([2.0, 5.0]))
        posterior = gaussian_update(prior, NoisySample(np.array([10.0, -10.0]), 1e-12))
        np.testing.assert_allclose(posterior.mean, prior.mean, atol=1e-9)
        np.testing.assert_allclose(posterior.precision, prior.precision, atol=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            gaussian_update(GaussianParams.standard_prior(2), NoisySample(np.zeros(3), 1.0))

    @pytest.mark.parametrize("alpha1, alpha2", [(0.5, 2.0), (1e-3, 40.0), (7.0, 7.0)])
    def test_sequential_updates_merge(self, alpha1, alpha2, rng):
        prior = GaussianParams(rng.standard_normal(5), rng.uniform(0.5, 3.0, 5))
        y1, y2 = rng.standard_normal(5), rng.standard_normal(5)
        sequential = gaussian_update(gaussian_update(prior, NoisySample(y1, alpha1)), NoisySample(y2, alpha2))
        alpha = alpha1 + alpha2
        merged = gaussian_update(prior, NoisySample((alpha1 * y1 + alpha2 * y2) / alpha, alpha))
        np.testing.assert_allclose(sequential.mean, merged.mean, rtol=0.0, atol=1e-12)
        np.testing.assert_allclose(sequential.precision, merged.precision, rtol=0.0, atol=1e-12)


class TestCategoricalUpdate:
    def test_tilts_by_exponential(self):
        prior = CategoricalParams(np.array([[0.5, 0.5]]))
        posterior = categorical_update(prior, NoisySample(np.array([[math.log(2.0), 0.0]]), 1.0))
        np.testing.assert_allclose(posterior.probs, [[2.0 / 3.0, 1.0 / 3.0]])

    @pytest.mark.parametrize("c", [-50.0, 0.0, 3.0, 700.0])
    def test_uniform_shift_cancels(self, c):
        prior = CategoricalParams(np.array([[0.5, 0.5]]))
        posterior = categorical_update(prior, NoisySample(np.array([[c, c]]), 1.0))
        np.testing.assert_allclose(posterior.probs, [[0.5, 0.5]])

    def test_zero_mass_stays_zero(self):
        prior = CategoricalParams(np.array([[1.0, 0.0]]))
        posterior = categorical_update(prior, NoisySample(np.array([[-3.0, 40.0]]), 1.0))
        np.testing.assert_array_equal(posterior.probs, [[1.0, 0.0]])

    def test_non_finite_observation(self):
        with pytest.raises(NumericError):
            categorical_update(CategoricalParams.uniform((1,), 2), NoisySample(np.array([[np.inf, 0.0]]), 1.0))

    def test_permuting_classes_permutes_posterior(self, rng):
        prior = CategoricalParams(rng.dirichlet(np.ones(5), size=(20, 2)))
        y = 3.0 * rng.standard_normal((20, 2, 5))
        order = rng.permutation(5)
        posterior = categorical_update(prior, NoisySample(y, 1.0))
        permuted = categorical_update(CategoricalParams(prior.probs[..., order]), NoisySample(y[..., order], 1.0))
        np.testing.assert_allclose(permuted.probs, posterior.probs[..., order], rtol=1e-12, atol=1e-15)

    def test_random_inputs_stay_on_simplex(self, rng):
        prior = CategoricalParams(rng.dirichlet(np.ones(4), size=(10_000, 1)))
        y = rng.standard_normal((10_000, 1, 4)) * rng.choice([0.1, 10.0, 300.0], size=(10_000, 1, 1))
        probs = categorical_update(prior, NoisySample(y, 1.0)).probs
        assert np.all(probs >= 0.0) and np.all(probs <= 1.0)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, rtol=0.0, atol=1e-9)


class TestGaussianFlow:
    def test_time_zero_is_prior(self, rng):
        prior = GaussianParams.standard_prior((4, 3))
        draw = gaussian_flow(prior, rng.uniform(-1, 1, (4, 3)), AccuracySchedule.continuous(0.5), 0.0, rng)
        np.testing.assert_array_equal(draw.mean, prior.mean)
        np.testing.assert_array_equal(draw.precision, prior.precision)

    def test_zero_data_has_zero_mean(self, rng):
        prior = GaussianParams.standard_prior((100_000, 1))
        draw = gaussian_flow(prior, np.zeros((100_000, 1)), AccuracySchedule.continuous(0.5), 0.5, rng)
        assert abs(draw.mean.mean()) < 0.01

    def test_per_row_times(self, rng):
        prior = GaussianParams.standard_prior((3, 2))
        t = np.array([0.0, 0.5, 1.0])
        draw = gaussian_flow(prior, np.ones((3, 2)), AccuracySchedule.continuous(0.5), t, rng)
        np.testing.assert_allclose(draw.precision[:, 0], 1.0 + beta(AccuracySchedule.continuous(0.5), t))

    @pytest.mark.parametrize("t", [0.25, 0.5, 1.0])
    def test_matches_sequential_updates(self, t):
        n_chains, n_steps = 400_000, 64
        schedule = AccuracySchedule.continuous(0.5, n_steps=n_steps)
        x = np.ones((n_chains, 1))
        b = beta(schedule, t)
        gamma = b / (1.0 + b)

        flow = gaussian_flow(GaussianParams.standard_prior((n_chains, 1)), x, schedule, t,
                             np.random.default_rng(1))
        assert flow.precision[0, 0] == pytest.approx(1.0 + b)

        chain_rng = np.random.default_rng(2)
        state = GaussianParams.standard_prior((n_chains, 1))
        for alpha in step_alphas(schedule)[:int(round(t * n_steps))]:
            y = x + chain_rng.standard_normal(x.shape) / math.sqrt(alpha)
            state = gaussian_update(state, NoisySample(y, alpha))

        for means in (flow.mean, state.mean):
            assert means.mean() == pytest.approx(gamma, rel=0.01)
            assert means.var() == pytest.approx(gamma * (1.0 - gamma), rel=0.01)

    def test_final_time_example(self):
        draw = gaussian_flow(GaussianParams.standard_prior((200_000, 1)), np.ones((200_000, 1)),
                             AccuracySchedule.continuous(0.5), 1.0, np.random.default_rng(3))
        assert draw.precision[0, 0] == pytest.approx(4.0)
        assert draw.mean.mean() == pytest.approx(0.75, rel=0.01)
        assert draw.mean.var() == pytest.approx(0.1875, rel=0.02)


class TestCategoricalFlow:
    def test_time_zero_is_prior(self, rng):
        prior = CategoricalParams.uniform((5, 3), 4)
        draw = categorical_flow(prior, rng.integers(0, 4, (5, 3)), AccuracySchedule.categorical(4.0), 0.0, rng)
        np.testing.assert_allclose(draw.probs, prior.probs, rtol=1e-12)

    def test_one_hot_prior_is_preserved(self, rng):
        prior = CategoricalParams(np.array([[[0.0, 1.0, 0.0]]]))
        draw = categorical_flow(prior, np.array([[0]]), AccuracySchedule.categorical(4.0), 0.7, rng)
        np.testing.assert_array_equal(draw.probs, prior.probs)

    def test_rejects_bad_class_index(self, rng):
        with pytest.raises(ShapeError):
            categorical_flow(CategoricalParams.uniform((1, 1), 2), np.array([[2]]),
                             AccuracySchedule.categorical(4.0), 0.5, rng)

    def test_matches_sequential_updates(self):
        n_chains, n_steps = 100_000, 64
        schedule = AccuracySchedule.categorical(4.0, n_steps=n_steps)
        x = np.zeros((n_chains, 1), dtype=np.int64)

        flow = categorical_flow(CategoricalParams.uniform((n_chains, 1), 2), x, schedule, 1.0,
                                np.random.default_rng(4))

        chain_rng = np.random.default_rng(5)
        state = CategoricalParams.uniform((n_chains, 1), 2)
        onehot = np.array([1.0, 0.0])
        for alpha in step_alphas(schedule):
            y = alpha * (2.0 * onehot - 1.0) + math.sqrt(2.0 * alpha) * chain_rng.standard_normal((n_chains, 1, 2))
            state = categorical_update(state, NoisySample(y, alpha))

        theta_flow = flow.probs[:, 0, 0]
        theta_chain = state.probs[:, 0, 0]
        assert theta_flow.mean() > 0.5
        bins = np.linspace(0.0, 1.0, 21)
        p, _ = np.histogram(theta_flow, bins=bins)
        q, _ = np.histogram(theta_chain, bins=bins)
        total_variation = 0.5 * np.abs(p / n_chains - q / n_chains).sum()
        assert total_variation < 0.02
