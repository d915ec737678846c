import logging
import math

import numpy as np
import pytest

from conftest import ConstantNet
from core.bfn import DataSchema
from core.continual import Task, TaskStream
from core.errors import ArgumentError, QualityError
from core.evaluation import (MLP_PROBE, EvalConfig, MetricsRecord, ScenarioEvaluator, class_shares,
                             forgetting_summary, loss_matrix_row, shares_from_predictions, train_probe,
                             with_forgetting)
from core.schedule import AccuracySchedule


def _two_points(count: int = 50):
    rows = np.repeat([[-0.5], [0.5]], count, axis=0)
    labels = np.repeat([0, 1], count)
    return rows, labels


def _stream_of(*tests) -> TaskStream:
    schema = DataSchema.continuous(tests[0].shape[1])
    return TaskStream(tuple(Task(f"task_{i}", t, t) for i, t in enumerate(tests)), schema)


class TestTrainProbe:
    def test_nearest_centroid(self, rng):
        rows, labels = _two_points()
        probe = train_probe(rows, labels, rng=rng)
        np.testing.assert_allclose(probe.centroids[:, 0], [-0.5, 0.5])
        assert probe.holdout_accuracy == 1.0
        assert probe.predict(np.array([[-0.4], [0.3]])).tolist() == [0, 1]

    def test_single_class(self, rng):
        with pytest.raises(ArgumentError):
            train_probe(np.zeros((10, 1)), np.zeros(10), rng=rng)

    def test_missing_expected_class(self, rng):
        rows, labels = _two_points()
        with pytest.raises(ArgumentError):
            train_probe(rows, labels, rng=rng, expected_classes=[0, 1, 2])

    def test_mlp_probe_is_deterministic(self):
        data_rng = np.random.default_rng(2)
        rows = np.concatenate([data_rng.normal(-0.5, 0.1, (100, 2)), data_rng.normal(0.5, 0.1, (100, 2))])
        labels = np.repeat([3, 7], 100)
        first = train_probe(rows, labels, MLP_PROBE, rng=np.random.default_rng(0))
        second = train_probe(rows, labels, MLP_PROBE, rng=np.random.default_rng(0))
        np.testing.assert_array_equal(first.params.values, second.params.values)
        assert first.holdout_accuracy >= 0.9
        assert first.predict(np.array([[-0.5, -0.5], [0.5, 0.5]])).tolist() == [3, 7]

    def test_accuracy_floor(self, rng):
        rows = rng.uniform(-1.0, 1.0, (200, 1))
        labels = rng.integers(0, 2, 200)
        with pytest.raises(QualityError):
            train_probe(rows, labels, rng=rng)

    def test_holdout_covers_every_class(self, rng):
        rows = np.array([[-0.5], [-0.5], [-0.4], [0.5]])
        probe = train_probe(rows, np.array([0, 0, 0, 1]), rng=rng, holdout_fraction=0.5)
        assert not probe.accuracy_on_fit_rows
        np.testing.assert_allclose(probe.centroids[1], [0.5])
        assert probe.holdout_accuracy == 1.0

    def test_accuracy_on_fit_rows_is_reported(self, rng, caplog):
        with caplog.at_level(logging.WARNING, logger="evaluation"):
            probe = train_probe(np.array([[-0.5], [0.5]]), np.array([0, 1]), rng=rng)
        assert probe.accuracy_on_fit_rows
        assert probe.holdout_accuracy == 1.0
        assert "measured on its fitting rows" in caplog.text


class TestClassShares:
    def test_even_split(self):
        np.testing.assert_array_equal(shares_from_predictions([0, 0, 1, 1], 2), [0.5, 0.5])

    def test_single_class(self):
        np.testing.assert_array_equal(shares_from_predictions([2, 2, 2], 3), [0.0, 0.0, 1.0])

    def test_random_samples_form_a_simplex(self, rng):
        rows, labels = _two_points()
        probe = train_probe(rows, labels, rng=rng)
        shares = class_shares(probe, rng.uniform(-1.0, 1.0, (1000, 1)))
        assert shares.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.all(shares >= 0.0)

    def test_needs_samples(self, rng):
        rows, labels = _two_points()
        probe = train_probe(rows, labels, rng=rng)
        with pytest.raises(ArgumentError):
            class_shares(probe, np.zeros((0, 1)))


class TestLossMatrixRow:
    def test_zero_prediction_in_bits(self, rng):
        net = ConstantNet(DataSchema.continuous(1), x_hat=[0.0])
        row = loss_matrix_row(net, _stream_of(np.ones((5, 1))), AccuracySchedule.continuous(0.5, 1), rng)
        np.testing.assert_allclose(row, [1.5 / math.log(2.0)])

    def test_identical_tasks(self, rng):
        test = rng.uniform(-1.0, 1.0, (40, 1))
        net = ConstantNet(DataSchema.continuous(1), x_hat=[0.1])
        row = loss_matrix_row(net, _stream_of(test, test, test), AccuracySchedule.continuous(0.1, 5), rng)
        assert row.shape == (3,)
        np.testing.assert_allclose(row, row[0], rtol=0.02)

    def test_perfect_network(self, rng):
        net = ConstantNet(DataSchema.continuous(1), x_hat=[0.3])
        stream = _stream_of(np.full((6, 1), 0.3), np.full((3, 1), 0.3))
        np.testing.assert_array_equal(loss_matrix_row(net, stream, AccuracySchedule.continuous(0.1, 4), rng), 0.0)

    def test_non_negative(self, tiny_continuous_net, rng):
        stream = _stream_of(rng.uniform(-1, 1, (30, 2)), rng.uniform(-1, 1, (30, 2)))
        row = loss_matrix_row(tiny_continuous_net, stream, tiny_continuous_net.schedule, rng)
        assert np.all(row >= 0.0)


class TestForgetting:
    def test_no_change(self):
        summary = forgetting_summary([[1.0, 5.0], [1.0, 1.0]])
        assert summary.per_task == (0.0,)
        assert summary.mean == 0.0

    def test_loss_increase(self):
        assert forgetting_summary([[1.0, 4.0], [2.0, 0.5]]).per_task == (1.0,)

    def test_single_task(self):
        summary = forgetting_summary([[0.7]])
        assert summary.per_task == ()
        assert summary.mean == 0.0

    def test_missing_rows(self):
        with pytest.raises(ArgumentError):
            forgetting_summary([[1.0, 2.0, 3.0], [1.0, 1.0, 1.0]])
        with pytest.raises(ArgumentError):
            forgetting_summary([])

    def test_final_record_gets_forgetting(self):
        records = [MetricsRecord(0, "a", (1.0, 0.0), (1.0, 3.0)), MetricsRecord(1, "b", (0.0, 1.0), (1.5, 1.0))]
        final = with_forgetting(records)
        assert final[0].forgetting == ()
        assert final[1].forgetting == (0.5, 0.0)


class TestMetricsRecord:
    def test_shares_must_sum_to_one(self):
        with pytest.raises(ArgumentError):
            MetricsRecord(0, "a", (0.5, 0.2), (1.0,))

    def test_losses_must_be_non_negative(self):
        with pytest.raises(ArgumentError):
            MetricsRecord(0, "a", (1.0,), (-0.1,))

    def test_record_shape(self):
        data = MetricsRecord(1, "b", (0.25, 0.75), (1.0, 2.0), (0.5, 0.0)).to_dict()
        assert sorted(data) == ["after_task", "class_shares", "forgetting", "loss_matrix_row", "task_id"]
        assert MetricsRecord.from_dict(data).class_shares == (0.25, 0.75)


class TestScenarioEvaluator:
    def test_records_one_row_per_task(self, tiny_continuous_net, rng):
        rows = np.concatenate([rng.normal(-0.5, 0.05, (40, 2)), rng.normal(0.5, 0.05, (40, 2))])
        labels = np.repeat([0, 1], 40)
        probe = train_probe(rows, labels, rng=rng)
        stream = _stream_of(rows[:40], rows[40:])
        evaluator = ScenarioEvaluator(stream, EvalConfig(samples=30, mc_samples=2, sample_steps=4), 11, probe)
        record = evaluator(tiny_continuous_net, 1)
        assert record.after_task == 1
        assert record.task_id == "task_1"
        assert len(record.loss_matrix_row) == 2
        assert sum(record.class_shares) == pytest.approx(1.0)
        assert evaluator.samples[1].shape == (30, 2)

    def test_repeatable(self, tiny_continuous_net, rng):
        stream = _stream_of(rng.uniform(-1, 1, (10, 2)))
        config = EvalConfig(samples=5, sample_steps=3)
        first = ScenarioEvaluator(stream, config, 4)(tiny_continuous_net, 0)
        second = ScenarioEvaluator(stream, config, 4)(tiny_continuous_net, 0)
        assert first == second
        assert first.class_shares == ()

    def test_rejects_unknown_probe(self):
        with pytest.raises(ArgumentError):
            EvalConfig(probe="svm")
