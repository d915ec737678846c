"""Post-task measurements: class shares of generated samples, the test-loss matrix and forgetting."""
import logging
from dataclasses import dataclass, field

import numpy as np

from core.bfn import discrete_time_loss, sample_rows
from core.continual import TaskStream
from core.errors import ArgumentError, QualityError
from core.flow import log_normalize
from core.model import NetworkSpec, OptimizerState, ParameterVector, backward, forward, init_parameters, optimizer_step

logger = logging.getLogger('evaluation')

NEAREST_CENTROID = "nearest_centroid"
MLP_PROBE = "mlp_probe"
PROBES = (NEAREST_CENTROID, MLP_PROBE)

LOSS_CHUNK = 256


@dataclass(frozen=True)
class EvalConfig:
    probe: str = NEAREST_CENTROID
    samples: int = 1000
    mc_samples: int = 16
    accuracy_floor: float = 0.9
    sample_steps: int = 100
    categorical_mode: str = "argmax"
    holdout_fraction: float = 0.2
    grid_columns: int = 8

    def __post_init__(self):
        if self.probe not in PROBES:
            raise ArgumentError(f"Unknown probe: {self.probe}")
        if self.samples < 1 or self.mc_samples < 1 or self.sample_steps < 1:
            raise ArgumentError("samples, mc_samples and sample_steps must be positive")

    def to_dict(self) -> dict:
        return {"probe": self.probe, "samples": self.samples, "mc_samples": self.mc_samples,
                "accuracy_floor": self.accuracy_floor, "sample_steps": self.sample_steps,
                "categorical_mode": self.categorical_mode, "holdout_fraction": self.holdout_fraction,
                "grid_columns": self.grid_columns}


@dataclass
class ClassifierProbe:
    """External classifier used to label generated samples.

    Probes only ever see sample values; nothing flows back into training.
    """

    kind: str
    classes: np.ndarray
    centroids: np.ndarray | None = None
    spec: NetworkSpec | None = None
    params: ParameterVector | None = None
    holdout_accuracy: float = 0.0
    accuracy_on_fit_rows: bool = False

    @property
    def n_classes(self) -> int:
        return self.classes.size

    def predict_index(self, samples) -> np.ndarray:
        """Position of the predicted class in ``classes`` for every sample."""
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if self.kind == NEAREST_CENTROID:
            distances = ((samples[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=-1)
            return np.argmin(distances, axis=1)
        scores = np.atleast_2d(forward(self.spec, self.params, samples, 0.0))
        return np.argmax(scores, axis=1)

    def predict(self, samples) -> np.ndarray:
        return self.classes[self.predict_index(samples)]


def _fit_centroids(rows: np.ndarray, positions: np.ndarray, n_classes: int) -> np.ndarray:
    return np.stack([rows[positions == c].mean(axis=0) for c in range(n_classes)])


def _fit_mlp(rows: np.ndarray, positions: np.ndarray, n_classes: int, rng, steps: int = 600,
             batch_size: int = 64) -> tuple[NetworkSpec, ParameterVector]:
    spec = NetworkSpec(rows.shape[1], (64,), n_classes, activation="relu", time_embedding="scalar-concat")
    params = init_parameters(spec, rng)
    state = OptimizerState.create("adam", 1e-2, spec.parameter_count)
    onehot = np.eye(n_classes)
    for _ in range(steps):
        picks = rng.integers(0, rows.shape[0], size=batch_size)
        scores = forward(spec, params, rows[picks], 0.0)
        upstream = (np.exp(log_normalize(scores)) - onehot[positions[picks]]) / batch_size
        state, params = optimizer_step(state, params, backward(spec, params, rows[picks], 0.0, upstream))
    return spec, params


def _class_holdout(positions: np.ndarray, n_classes: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    """Per-class split that leaves at least one fitting row in every class."""
    fit, holdout = [], []
    for c in range(n_classes):
        members = rng.permutation(np.flatnonzero(positions == c))
        n_holdout = min(int(round(fraction * members.size)), members.size - 1)
        holdout.append(members[:n_holdout])
        fit.append(members[n_holdout:])
    return np.sort(np.concatenate(fit)), np.sort(np.concatenate(holdout))


def train_probe(rows, labels, kind: str = NEAREST_CENTROID, rng=None, expected_classes=None,
                holdout_fraction: float = 0.2, accuracy_floor: float = 0.9) -> ClassifierProbe:
    """Fits a classifier probe on labelled real data.

    Args:
        rows: (N, D) data rows.
        labels: Class label per row.
        kind: "nearest_centroid" or "mlp_probe".
        rng: Generator for the holdout split and probe training.
        expected_classes: Classes that must all be present.
        holdout_fraction: Share of each class held out to measure accuracy.
            Every class keeps at least one fitting row.
        accuracy_floor: Minimum holdout accuracy.

    Raises:
        ArgumentError: Fewer than two classes, or an expected class is missing.
        QualityError: Holdout accuracy below ``accuracy_floor``.
    """
    if kind not in PROBES:
        raise ArgumentError(f"Unknown probe: {kind}")
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if expected_classes is not None:
        missing = sorted(set(np.asarray(expected_classes).tolist()) - set(classes.tolist()))
        if missing:
            raise ArgumentError(f"probe training data lacks classes {missing}")
    if classes.size < 2:
        raise ArgumentError("a probe needs at least two classes")
    rng = rng if rng is not None else np.random.default_rng(0)
    positions = np.searchsorted(classes, labels)
    fit, holdout = _class_holdout(positions, classes.size, holdout_fraction, rng)
    if kind == NEAREST_CENTROID:
        probe = ClassifierProbe(kind, classes, centroids=_fit_centroids(rows[fit], positions[fit], classes.size))
    else:
        spec, params = _fit_mlp(rows[fit], positions[fit], classes.size, rng)
        probe = ClassifierProbe(kind, classes, spec=spec, params=params)
    check = holdout
    if not holdout.size:
        logger.warning(f"No rows left to hold out for the {kind} probe; accuracy is measured on its fitting rows")
        check, probe.accuracy_on_fit_rows = fit, True
    probe.holdout_accuracy = float(np.mean(probe.predict_index(rows[check]) == positions[check]))
    logger.info(f"{kind} probe over {classes.size} classes: holdout accuracy {probe.holdout_accuracy:.3f}")
    if probe.holdout_accuracy < accuracy_floor:
        raise QualityError(f"{kind} probe holdout accuracy {probe.holdout_accuracy:.3f} "
                           f"is below the floor {accuracy_floor}")
    return probe


def shares_from_predictions(positions, n_classes: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        raise ArgumentError("class shares need at least one sample")
    return np.bincount(positions, minlength=n_classes) / positions.size


def class_shares(probe: ClassifierProbe, samples) -> np.ndarray:
    """Normalised histogram of probe predictions over the probe's classes."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise ArgumentError("class shares need at least one sample")
    return shares_from_predictions(probe.predict_index(samples), probe.n_classes)


def mean_loss_nats(rows: np.ndarray, net, schedule, rng, mc_samples: int = 16) -> float:
    """Mean discrete-time loss over many rows, evaluated in chunks."""
    total = 0.0
    for start in range(0, rows.shape[0], LOSS_CHUNK):
        chunk = rows[start:start + LOSS_CHUNK]
        total += discrete_time_loss(chunk, net, schedule, rng, mc_samples).total_nats * chunk.shape[0]
    return total / rows.shape[0]


def loss_matrix_row(net, stream: TaskStream, schedule, rng, mc_samples: int = 16) -> np.ndarray:
    """Test-split loss of every task in bits per dimension."""
    d_total = stream.schema.d_total
    row = []
    for task in stream.tasks:
        rows = task.test
        if rows.shape[0] == 0:
            logger.warning(f"Task {task.task_id} has no test rows; scoring its training split")
            rows = task.train
        row.append(mean_loss_nats(rows, net, schedule, rng, mc_samples) / (d_total * np.log(2.0)))
    return np.array(row)


@dataclass(frozen=True)
class MetricsRecord:
    """Measurements taken after one task of a scenario."""

    after_task: int
    task_id: str
    class_shares: tuple = ()
    loss_matrix_row: tuple = ()
    forgetting: tuple = ()

    def __post_init__(self):
        if self.class_shares and abs(sum(self.class_shares) - 1.0) > 1e-9:
            raise ArgumentError("class shares must sum to 1")
        if any(v < 0.0 for v in self.loss_matrix_row):
            raise ArgumentError("loss matrix entries must be non-negative")

    def to_dict(self) -> dict:
        return {"after_task": self.after_task, "task_id": self.task_id,
                "class_shares": list(self.class_shares), "loss_matrix_row": list(self.loss_matrix_row),
                "forgetting": list(self.forgetting)}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsRecord":
        return cls(int(data["after_task"]), str(data["task_id"]), tuple(data.get("class_shares", ())),
                   tuple(data.get("loss_matrix_row", ())), tuple(data.get("forgetting", ())))


@dataclass(frozen=True)
class ForgettingSummary:
    per_task: tuple
    mean: float


def forgetting_summary(matrix) -> ForgettingSummary:
    """F_j = M[T-1][j] - M[j][j] for every task j before the last, plus their mean.

    Args:
        matrix: Loss-matrix rows, one recorded after each of the T tasks.

    Raises:
        ArgumentError: No rows, or fewer rows than tasks.
    """
    rows = [list(r) for r in matrix]
    if not rows:
        raise ArgumentError("forgetting needs at least one loss-matrix row")
    n_tasks = len(rows[-1])
    if len(rows) < n_tasks or any(len(r) != n_tasks for r in rows):
        raise ArgumentError(f"forgetting needs {n_tasks} rows of length {n_tasks}, got {len(rows)}")
    final = rows[n_tasks - 1]
    per_task = tuple(float(final[j] - rows[j][j]) for j in range(n_tasks - 1))
    mean = float(np.mean(per_task)) if per_task else 0.0
    return ForgettingSummary(per_task, mean)


@dataclass
class ScenarioEvaluator:
    """Per-task evaluation hook for ``run_scenario``.

    Generates ``config.samples`` rows, labels them with the probe (when one is
    given) and scores every task's test split. Samples are kept per task for
    dumping.
    """

    stream: TaskStream
    config: EvalConfig
    seed: int
    probe: ClassifierProbe | None = None
    samples: dict = field(default_factory=dict)

    def __call__(self, net, task_index: int) -> MetricsRecord:
        sample_seq, loss_seq = np.random.SeedSequence([self.seed, task_index]).spawn(2)
        generated = sample_rows(net, net.schedule, net.schema, np.random.default_rng(sample_seq), self.config.samples,
                                self.config.sample_steps, self.config.categorical_mode)
        self.samples[task_index] = generated
        shares = tuple(class_shares(self.probe, generated).tolist()) if self.probe is not None else ()
        row = loss_matrix_row(net, self.stream, net.schedule, np.random.default_rng(loss_seq), self.config.mc_samples)
        logger.info(f"After task {task_index}: bits/dim {np.round(row, 4).tolist()}")
        return MetricsRecord(task_index, self.stream.tasks[task_index].task_id, shares, tuple(row.tolist()))


def with_forgetting(records: list[MetricsRecord]) -> list[MetricsRecord]:
    """Attaches the forgetting vector (with a trailing 0 for the final task) to the last record."""
    if not records:
        return records
    summary = forgetting_summary([r.loss_matrix_row for r in records])
    last = records[-1]
    final = MetricsRecord(last.after_task, last.task_id, last.class_shares, last.loss_matrix_row,
                          summary.per_task + (0.0,))
    return records[:-1] + [final]
