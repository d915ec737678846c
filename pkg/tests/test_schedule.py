import math

import numpy as np
import pytest

from core.errors import ArgumentError, DomainError, UnsupportedSchemaError
from core.schedule import AccuracySchedule, FlowSchedule, alpha_rate, beta, step_alphas


class TestAccuracySchedule:
    def test_rejects_sigma_outside_unit_interval(self):
        with pytest.raises(ArgumentError):
            AccuracySchedule.continuous(sigma1=1.5)
        with pytest.raises(ArgumentError):
            AccuracySchedule.continuous(sigma1=0.0)

    def test_rejects_non_positive_beta1(self):
        with pytest.raises(ArgumentError):
            AccuracySchedule.categorical(beta1=0.0)

    def test_rejects_zero_steps(self):
        with pytest.raises(ArgumentError):
            AccuracySchedule.continuous(0.5, n_steps=0)

    def test_dict_round_trip(self):
        schedule = AccuracySchedule.categorical(4.0, n_steps=7)
        assert AccuracySchedule.from_dict(schedule.to_dict()) == schedule


class TestBeta:
    def test_continuous_values(self):
        schedule = AccuracySchedule.continuous(0.5)
        assert beta(schedule, 1.0) == pytest.approx(3.0)
        assert beta(schedule, 0.0) == 0.0

    def test_categorical_value(self):
        assert beta(AccuracySchedule.categorical(4.0), 0.5) == pytest.approx(1.0)

    def test_scalar_in_float_out(self):
        assert isinstance(beta(AccuracySchedule.continuous(0.5), 0.3), float)

    def test_elementwise_and_monotone(self):
        t = np.linspace(0.0, 1.0, 50)
        for schedule in (AccuracySchedule.continuous(0.02), AccuracySchedule.categorical(4.0)):
            values = beta(schedule, t)
            assert values.shape == t.shape
            assert np.all(np.diff(values) >= 0.0)

    @pytest.mark.parametrize("t", [-0.1, 1.1, float("nan")])
    def test_domain(self, t):
        with pytest.raises(DomainError):
            beta(AccuracySchedule.continuous(0.5), t)


class TestAlphaRate:
    def test_continuous_values(self):
        schedule = AccuracySchedule.continuous(0.5)
        assert alpha_rate(schedule, 0.0) == pytest.approx(-2.0 * math.log(0.5))
        assert alpha_rate(schedule, 1.0) == pytest.approx(5.5452, abs=1e-4)

    def test_categorical_value(self):
        assert alpha_rate(AccuracySchedule.categorical(4.0), 0.25) == pytest.approx(2.0)

    @pytest.mark.parametrize("schedule", [AccuracySchedule.continuous(0.02), AccuracySchedule.categorical(4.0)])
    @pytest.mark.parametrize("t", [0.1, 0.3, 0.7])
    def test_matches_finite_difference(self, schedule, t):
        h = 1e-5
        numeric = (beta(schedule, t + h) - beta(schedule, t - h)) / (2.0 * h)
        assert alpha_rate(schedule, t) == pytest.approx(numeric, rel=1e-4)

    def test_domain(self):
        with pytest.raises(DomainError):
            alpha_rate(AccuracySchedule.categorical(4.0), 2.0)


class TestStepAlphas:
    def test_continuous_two_steps(self):
        np.testing.assert_allclose(step_alphas(AccuracySchedule.continuous(0.5, n_steps=2)), [1.0, 2.0])

    def test_continuous_one_step(self):
        np.testing.assert_allclose(step_alphas(AccuracySchedule.continuous(0.5, n_steps=1)), [3.0])

    def test_categorical_two_steps(self):
        np.testing.assert_allclose(step_alphas(AccuracySchedule.categorical(4.0, n_steps=2)), [1.0, 3.0])

    def test_categorical_closed_form(self):
        n = 10
        i = np.arange(1, n + 1)
        expected = 4.0 * (2 * i - 1) / n ** 2
        np.testing.assert_allclose(step_alphas(AccuracySchedule.categorical(4.0, n_steps=n)), expected)

    @pytest.mark.parametrize("n", [1, 10, 10_000])
    @pytest.mark.parametrize("schedule", [AccuracySchedule.continuous(0.02), AccuracySchedule.categorical(4.0)])
    def test_sum_is_final_beta(self, schedule, n):
        alphas = step_alphas(schedule.with_steps(n))
        assert alphas.shape == (n,)
        assert np.all(alphas > 0.0)
        assert np.sum(alphas) == pytest.approx(beta(schedule, 1.0), rel=1e-10, abs=1e-10)


class TestFlowSchedule:
    def test_requires_shared_steps(self):
        with pytest.raises(ArgumentError):
            FlowSchedule(AccuracySchedule.continuous(0.5, 10), AccuracySchedule.categorical(4.0, 20))

    def test_wraps_single_schedule(self):
        flow = FlowSchedule.of(AccuracySchedule.categorical(4.0, 5))
        assert flow.categorical.beta1 == 4.0
        assert flow.n_steps == 5
        with pytest.raises(UnsupportedSchemaError):
            flow.require("continuous")

    def test_with_steps_and_round_trip(self):
        flow = FlowSchedule(AccuracySchedule.continuous(0.5, 10), AccuracySchedule.categorical(4.0, 10))
        moved = flow.with_steps(3)
        assert moved.continuous.n_steps == moved.categorical.n_steps == 3
        assert FlowSchedule.from_dict(flow.to_dict()) == flow
