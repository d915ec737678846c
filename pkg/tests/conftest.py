import numpy as np
import pytest

from core.bfn import DataSchema, FlowNetwork, Prediction, Variable
from core.flow import safe_log
from core.schedule import AccuracySchedule, FlowSchedule


class ConstantNet:
    """Stub network whose output ignores its input.

    ``x_hat`` is broadcast to every row; ``probs`` gives one (m, K) simplex
    block per categorical group.
    """

    def __init__(self, schema: DataSchema, x_hat=None, probs=(), prior_precision: float = 1.0):
        self.schema = schema
        self.x_hat = None if x_hat is None else np.asarray(x_hat, dtype=np.float64)
        self.probs = tuple(np.asarray(p, dtype=np.float64) for p in probs)
        self.prior_precision = prior_precision
        self.calls = 0

    def predict(self, state, t):
        self.calls += 1
        rows = state.rows
        x_hat = None
        if self.x_hat is not None:
            x_hat = np.broadcast_to(self.x_hat, (rows, self.schema.continuous_index.size)).copy()
        log_probs = tuple(np.broadcast_to(safe_log(p), (rows,) + p.shape).copy() for p in self.probs)
        return Prediction(x_hat, log_probs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def continuous_schema():
    return DataSchema.continuous(1)


@pytest.fixture
def binary_schema():
    return DataSchema.categorical(1, 2)


@pytest.fixture
def tiny_continuous_net():
    schema = DataSchema.continuous(2)
    schedule = AccuracySchedule.continuous(0.1, n_steps=4)
    return FlowNetwork.create(schema, schedule, hidden_widths=(6,), activation="tanh",
                              time_embedding="scalar-concat", rng=np.random.default_rng(7))


@pytest.fixture
def tiny_categorical_net():
    schema = DataSchema.categorical(2, 3)
    schedule = AccuracySchedule.categorical(3.0, n_steps=4)
    return FlowNetwork.create(schema, schedule, hidden_widths=(6,), activation="tanh",
                              time_embedding="scalar-concat", rng=np.random.default_rng(11))


@pytest.fixture
def tiny_mixed_net():
    schema = DataSchema((Variable("a", "continuous"), Variable("b", "categorical", 2), Variable("c", "continuous")))
    schedule = FlowSchedule(AccuracySchedule.continuous(0.1, n_steps=3), AccuracySchedule.categorical(3.0, n_steps=3))
    return FlowNetwork.create(schema, schedule, hidden_widths=(5,), activation="tanh",
                              time_embedding="sinusoidal", frequencies=2, rng=np.random.default_rng(5))
