"""Sequential training over a task stream with the four mitigation strategies.

finetune trains on each task in turn; regularize adds an L1/L2 pull toward the
parameters the previous task ended with; buffer rehearses stored real rows;
generative_replay mixes in rows sampled from a frozen copy of the network
taken at the start of each task.
"""
import logging
import os
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from core.bfn import DataSchema, FlowNetwork, batch_loss, sample_rows
from core.errors import ArgumentError, FlowRecallError, ScenarioAborted, ShapeError
from core.model import OPTIMIZERS, OptimizerState, ParameterVector, optimizer_step, write_checkpoint

logger = logging.getLogger('continual')

FINETUNE = "finetune"
REGULARIZE = "regularize"
BUFFER = "buffer"
GENERATIVE_REPLAY = "generative_replay"
STRATEGIES = (FINETUNE, REGULARIZE, BUFFER, GENERATIVE_REPLAY)

RING = "ring"
RESERVOIR = "reservoir"
GLOBAL = "global"
PER_TASK = "per_task"

# Provenance tag of rows drawn from the frozen generator.
GENERATED = -1


@dataclass(frozen=True)
class Task:
    task_id: str
    train: np.ndarray
    test: np.ndarray
    labels: tuple = ()


@dataclass(frozen=True)
class TaskStream:
    """Ordered tasks sharing one schema."""

    tasks: tuple[Task, ...]
    schema: DataSchema

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ArgumentError("a task stream needs at least one task")
        for task in tasks:
            for split in (task.train, task.test):
                if split.ndim != 2 or split.shape[1] != self.schema.d_total:
                    raise ShapeError(f"task {task.task_id} has rows of width {split.shape[-1]}, "
                                     f"schema expects {self.schema.d_total}")
            if task.train.shape[0] == 0:
                raise ArgumentError(f"task {task.task_id} has an empty training split")
        object.__setattr__(self, "tasks", tasks)

    def __len__(self) -> int:
        return len(self.tasks)


@dataclass(frozen=True)
class StrategyConfig:
    """Which mitigation strategy to run and its knobs.

    Only the fields of the selected ``kind`` are meaningful.
    """

    kind: str = FINETUNE
    p: int = 2
    lam: float = 0.0
    capacity: int = 500
    policy: str = RESERVOIR
    scope: str = GLOBAL
    replay_fraction: float = 0.5
    generator_steps: int = 100

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ArgumentError(f"Unknown strategy: {self.kind}")
        if self.kind == REGULARIZE:
            if self.p not in (1, 2):
                raise ArgumentError(f"regularize needs p in {{1, 2}}, got {self.p}")
            if self.lam < 0.0:
                raise ArgumentError(f"regularize needs lambda >= 0, got {self.lam}")
        if self.kind in (BUFFER, GENERATIVE_REPLAY) and not 0.0 <= self.replay_fraction <= 1.0:
            raise ArgumentError(f"replay_fraction must lie in [0, 1], got {self.replay_fraction}")
        if self.kind == BUFFER:
            if self.capacity < 1:
                raise ArgumentError("buffer capacity must be positive")
            if self.policy not in (RING, RESERVOIR):
                raise ArgumentError(f"Unknown buffer policy: {self.policy}")
            if self.scope not in (GLOBAL, PER_TASK):
                raise ArgumentError(f"Unknown buffer scope: {self.scope}")
        if self.kind == GENERATIVE_REPLAY and self.generator_steps < 1:
            raise ArgumentError("generator_steps must be at least 1")

    @classmethod
    def finetune(cls) -> "StrategyConfig":
        return cls(FINETUNE)

    @classmethod
    def regularize(cls, p: int, lam: float) -> "StrategyConfig":
        return cls(REGULARIZE, p=p, lam=lam)

    @classmethod
    def buffer(cls, capacity: int = 500, policy: str = RESERVOIR, replay_fraction: float = 0.5,
               scope: str = GLOBAL) -> "StrategyConfig":
        return cls(BUFFER, capacity=capacity, policy=policy, replay_fraction=replay_fraction, scope=scope)

    @classmethod
    def generative_replay(cls, replay_fraction: float = 0.5, generator_steps: int = 100) -> "StrategyConfig":
        return cls(GENERATIVE_REPLAY, replay_fraction=replay_fraction, generator_steps=generator_steps)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "p": self.p, "lambda": self.lam, "capacity": self.capacity,
                "policy": self.policy, "scope": self.scope, "replay_fraction": self.replay_fraction,
                "generator_steps": self.generator_steps}


@dataclass(frozen=True)
class TrainingConfig:
    optimizer: str = "adam"
    learning_rate: float = 3e-3
    steps_per_task: int = 2000
    batch_size: int = 64
    loss: str = "discrete"
    mc_samples: int = 1
    t_samples: int = 1
    clip_norm: float | None = 1.0
    reset_per_task: bool = True
    log_every: int = 100

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ArgumentError(f"Unknown optimizer: {self.optimizer}")
        if not self.learning_rate > 0.0:
            raise ArgumentError("learning_rate must be positive")
        if self.steps_per_task < 0:
            raise ArgumentError("steps_per_task must be non-negative")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be positive")
        if self.loss not in ("discrete", "continuous"):
            raise ArgumentError(f"Unknown loss: {self.loss}")

    def to_dict(self) -> dict:
        return {"optimizer": self.optimizer, "learning_rate": self.learning_rate,
                "steps_per_task": self.steps_per_task, "batch_size": self.batch_size, "loss": self.loss,
                "mc_samples": self.mc_samples, "t_samples": self.t_samples, "clip_norm": self.clip_norm,
                "reset_per_task": self.reset_per_task, "log_every": self.log_every}


@dataclass
class ReplayBuffer:
    """Bounded store of real rows, each tagged with the task it came from."""

    capacity: int
    policy: str = RESERVOIR
    items: list = field(default_factory=list)
    tags: list = field(default_factory=list)
    seen_count: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ArgumentError("buffer capacity must be positive")
        if self.policy not in (RING, RESERVOIR):
            raise ArgumentError(f"Unknown buffer policy: {self.policy}")
        if self.policy == RING:
            self.items = deque(self.items, maxlen=self.capacity)
            self.tags = deque(self.tags, maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self.items)

    def rows(self) -> np.ndarray:
        return np.array(list(self.items))

    def draw(self, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
        """Uniform draws with replacement; returns (rows, tags)."""
        picks = rng.integers(0, len(self.items), size=count)
        return self.rows()[picks], np.array(list(self.tags), dtype=np.int64)[picks]


def buffer_insert(buffer: ReplayBuffer, row, rng, tag: int = 0) -> ReplayBuffer:
    """Offers one row to the buffer.

    ring evicts the oldest row when full. reservoir keeps every row seen so far
    with probability capacity / seen_count.
    """
    row = np.array(row, dtype=np.float64)
    buffer.seen_count += 1
    if buffer.policy == RING or len(buffer.items) < buffer.capacity:
        buffer.items.append(row)
        buffer.tags.append(tag)
        return buffer
    slot = int(rng.integers(0, buffer.seen_count))
    if slot < buffer.capacity:
        buffer.items[slot] = row
        buffer.tags[slot] = tag
    return buffer


class RehearsalMemory:
    """Buffer strategy storage: one global buffer, or one buffer per seen task.

    With per-task scope every task gets ``capacity // n_tasks`` slots and draws
    are uniform over the union of all per-task buffers.
    """

    def __init__(self, capacity: int, policy: str = RESERVOIR, scope: str = GLOBAL, n_tasks: int = 1):
        if scope not in (GLOBAL, PER_TASK):
            raise ArgumentError(f"Unknown buffer scope: {scope}")
        self.scope = scope
        self.policy = policy
        self.slot_capacity = capacity if scope == GLOBAL else max(1, capacity // max(1, n_tasks))
        self.buffers: dict[int, ReplayBuffer] = {}

    def _buffer_for(self, tag: int) -> ReplayBuffer:
        key = 0 if self.scope == GLOBAL else tag
        if key not in self.buffers:
            self.buffers[key] = ReplayBuffer(self.slot_capacity, self.policy)
        return self.buffers[key]

    def __len__(self) -> int:
        return sum(len(b) for b in self.buffers.values())

    def insert(self, row, rng, tag: int):
        buffer_insert(self._buffer_for(tag), row, rng, tag)

    def draw(self, count: int, rng) -> tuple[np.ndarray, np.ndarray]:
        filled = [self.buffers[key] for key in sorted(self.buffers) if len(self.buffers[key])]
        rows = np.concatenate([buffer.rows() for buffer in filled])
        tags = np.concatenate([np.array(list(buffer.tags), dtype=np.int64) for buffer in filled])
        picks = rng.integers(0, rows.shape[0], size=count)
        return rows[picks], tags[picks]


def regularization_penalty(params: ParameterVector, anchor: ParameterVector, p: int,
                           lam: float) -> tuple[float, ParameterVector]:
    """L1 or L2 pull toward the anchor.

    Args:
        params: Current parameters.
        anchor: Parameters at the end of the previous task.
        p: 1 for lam * sum|w - w*|, 2 for lam * sum (w - w*)^2.
        lam: Penalty weight.

    Returns:
        (penalty, gradient). For p = 1 the subgradient uses sign(0) = 0.
    """
    params.check_layout(anchor)
    if p not in (1, 2):
        raise ArgumentError(f"p must be 1 or 2, got {p}")
    delta = params.values - anchor.values
    if p == 2:
        return float(lam * np.sum(delta * delta)), ParameterVector(2.0 * lam * delta, params.layout)
    return float(lam * np.sum(np.abs(delta))), ParameterVector(lam * np.sign(delta), params.layout)


@dataclass(frozen=True)
class TrainingBatch:
    """Rows fed to one optimizer step with the task each row came from (GENERATED for replayed samples)."""

    rows: np.ndarray
    provenance: np.ndarray


def make_training_batch(task_batch, strategy: StrategyConfig, buffer, frozen_generator, rng,
                        task_index: int = 0) -> TrainingBatch:
    """Mixes replayed rows into a batch of current-task rows.

    The last floor(replay_fraction * |batch|) rows are replaced: by uniform
    buffer draws for the buffer strategy, by fresh samples from the frozen
    network for generative replay. Nothing is replaced on the first task or
    while the buffer is empty.
    """
    rows = np.array(task_batch, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise ArgumentError("make_training_batch needs a non-empty 2-D batch")
    provenance = np.full(rows.shape[0], task_index, dtype=np.int64)
    if strategy.kind in (FINETUNE, REGULARIZE) or task_index == 0:
        return TrainingBatch(rows, provenance)
    count = int(np.floor(strategy.replay_fraction * rows.shape[0]))
    if count == 0:
        return TrainingBatch(rows, provenance)
    if strategy.kind == BUFFER:
        if buffer is None or len(buffer) == 0:
            return TrainingBatch(rows, provenance)
        replayed, tags = buffer.draw(count, rng)
    else:
        if frozen_generator is None:
            return TrainingBatch(rows, provenance)
        replayed = sample_rows(frozen_generator, frozen_generator.schedule, frozen_generator.schema, rng,
                               count, n_steps=strategy.generator_steps)
        tags = np.full(count, GENERATED, dtype=np.int64)
    rows[-count:] = replayed
    provenance[-count:] = tags
    return TrainingBatch(rows, provenance)


@dataclass
class TaskResult:
    net: FlowNetwork
    optimizer: OptimizerState
    losses: list = field(default_factory=list)


def train_task(net: FlowNetwork, optimizer: OptimizerState, task: Task, strategy: StrategyConfig,
               config: TrainingConfig, rng, task_index: int = 0, memory: RehearsalMemory | None = None,
               frozen_generator: FlowNetwork | None = None, anchor: ParameterVector | None = None,
               side_rng=None) -> TaskResult:
    """Runs ``config.steps_per_task`` optimizer steps on one task.

    Args:
        net: Network at the start of the task.
        optimizer: Optimizer state to continue from.
        task: The task whose training split is sampled.
        strategy: Mitigation strategy.
        config: Optimizer and batch settings.
        rng: Generator for batch selection and loss estimation.
        task_index: Position of the task in the stream.
        memory: Rehearsal storage for the buffer strategy.
        frozen_generator: Network snapshot for generative replay.
        anchor: Regularisation anchor; no penalty when None.
        side_rng: Generator for buffer bookkeeping and replay draws, kept apart
            from ``rng`` so strategies do not perturb the training stream.

    Returns:
        TaskResult with the trained network, optimizer state and per-step losses.
    """
    side_rng = side_rng if side_rng is not None else rng
    losses = []
    train = task.train
    for step in range(1, config.steps_per_task + 1):
        picks = rng.integers(0, train.shape[0], size=config.batch_size)
        task_batch = train[picks]
        batch = make_training_batch(task_batch, strategy, memory, frozen_generator, side_rng, task_index)
        report, gradient = batch_loss(batch.rows, net, net.schedule, rng, config.loss, config.mc_samples,
                                      config.t_samples)
        loss = report.total_nats
        if strategy.kind == REGULARIZE and anchor is not None:
            penalty, penalty_grad = regularization_penalty(net.params, anchor, strategy.p, strategy.lam)
            loss += penalty
            gradient = ParameterVector(gradient.values + penalty_grad.values, gradient.layout)
        optimizer, params = optimizer_step(optimizer, net.params, gradient)
        net = net.with_params(params)
        if strategy.kind == BUFFER and memory is not None:
            for row in task_batch:
                memory.insert(row, side_rng, task_index)
        losses.append(loss)
        if config.log_every and step % config.log_every == 0:
            logger.info(f"Task {task.task_id} step {step}/{config.steps_per_task}: loss {loss:.4f} nats")
    return TaskResult(net, optimizer, losses)


@dataclass
class ScenarioResult:
    net: FlowNetwork
    records: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)


def run_scenario(stream: TaskStream, net: FlowNetwork, strategy: StrategyConfig, config: TrainingConfig,
                 seed, evaluator: Callable | None = None, checkpoint_dir: str | None = None,
                 manifest_extra: dict | None = None) -> ScenarioResult:
    """Trains on every task of the stream in order.

    At each task start the regularisation anchor and the generative-replay
    snapshot are taken from the current parameters. After each task the
    evaluator (called as ``evaluator(net, task_index)``) produces that task's
    record and a checkpoint is written to ``checkpoint_dir``.

    Args:
        stream: Tasks to learn.
        net: Initial network.
        strategy: Mitigation strategy.
        config: Optimizer and batch settings.
        seed: Integer seed or numpy SeedSequence.
        evaluator: Optional per-task evaluation hook.
        checkpoint_dir: Directory for ``task_<i>.ckpt`` files; none written when None.
        manifest_extra: Extra entries stored in every checkpoint manifest.

    Raises:
        ScenarioAborted: A task failed; carries the records of the finished tasks.
    """
    if net.schema != stream.schema:
        raise ShapeError("network schema does not match the task stream schema")
    sequence = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    train_seq, side_seq = sequence.spawn(2)
    rng = np.random.default_rng(train_seq)
    side_rng = np.random.default_rng(side_seq)
    memory = None
    if strategy.kind == BUFFER:
        memory = RehearsalMemory(strategy.capacity, strategy.policy, strategy.scope, len(stream))
    optimizer = OptimizerState.create(config.optimizer, config.learning_rate, len(net.params), config.clip_norm)
    result = ScenarioResult(net)
    for index, task in enumerate(stream.tasks):
        logger.info(f"Starting task {index + 1}/{len(stream)} ({task.task_id}) with strategy {strategy.kind}")
        try:
            if config.reset_per_task and index:
                optimizer = OptimizerState.create(config.optimizer, config.learning_rate, len(net.params),
                                                  config.clip_norm)
            anchor = net.params.copy() if strategy.kind == REGULARIZE and index else None
            frozen = net.copy() if strategy.kind == GENERATIVE_REPLAY and index else None
            outcome = train_task(net, optimizer, task, strategy, config, rng, index, memory, frozen, anchor,
                                 side_rng)
            net, optimizer = outcome.net, outcome.optimizer
            result.net = net
            result.losses.append(outcome.losses)
            if evaluator is not None:
                result.records.append(evaluator(net, index))
            if checkpoint_dir is not None:
                manifest = net.to_manifest()
                manifest.update(manifest_extra or {})
                manifest["task_index"] = index
                manifest["strategy"] = strategy.to_dict()
                path = os.path.join(checkpoint_dir, f"task_{index}.ckpt")
                result.checkpoints.append(write_checkpoint(path, manifest, net.params))
        except (FlowRecallError, ArithmeticError, OSError) as e:
            logger.error(f"Error in task {task.task_id}: {e}")
            raise ScenarioAborted(f"task {task.task_id} failed: {e}", result.records, index) from e
    return result
