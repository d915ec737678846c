"""Experiment configuration: JSON file -> dataclasses with every default filled in."""
import json
import logging
import os
from dataclasses import dataclass, field, fields

from core.bfn import DataSchema
from core.continual import StrategyConfig, TrainingConfig
from core.data import SplitSpec, TableDeclaration
from core.errors import ArgumentError, ConfigError
from core.evaluation import EvalConfig
from core.model import ACTIVATIONS, TIME_EMBEDDINGS
from core.schedule import AccuracySchedule, FlowSchedule

logger = logging.getLogger('cli')

SOURCES = ("mixture", "idx", "csv", "flights")
MAX_SEED = 2 ** 64


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "mixture"
    path: str | None = None
    labels_path: str | None = None
    threshold: float = 0.5
    downscale: int | None = 14
    limit: int | None = None
    n_rows: int = 4000
    modes: tuple = (((-0.5,), 0.05), ((0.5,), 0.05))
    weights: tuple = (0.5, 0.5)
    declaration: dict | None = None
    split: SplitSpec = field(default_factory=SplitSpec)

    def to_dict(self) -> dict:
        return {
            "source": self.source, "path": self.path, "labels_path": self.labels_path,
            "threshold": self.threshold, "downscale": self.downscale, "limit": self.limit,
            "n_rows": self.n_rows, "modes": [[list(m), s] for m, s in self.modes], "weights": list(self.weights),
            "declaration": self.declaration,
            "split": {"mode": self.split.mode, "classes_per_task": self.split.classes_per_task,
                      "column": self.split.column, "seed": self.split.seed,
                      "test_fraction": self.split.test_fraction},
        }


@dataclass(frozen=True)
class ScheduleConfig:
    sigma1: float = 0.02
    beta1: float = 4.0
    train_steps: int = 20
    prior_precision: float = 1.0

    def flow_schedule(self, schema: DataSchema) -> FlowSchedule:
        """Schedules for the variable kinds present in ``schema``."""
        return FlowSchedule(
            continuous=AccuracySchedule.continuous(self.sigma1, self.train_steps) if schema.has_continuous else None,
            categorical=AccuracySchedule.categorical(self.beta1, self.train_steps) if schema.has_categorical else None,
        )

    def to_dict(self) -> dict:
        return {"sigma1": self.sigma1, "beta1": self.beta1, "train_steps": self.train_steps,
                "prior_precision": self.prior_precision}


@dataclass(frozen=True)
class NetworkConfig:
    hidden_widths: tuple = (256, 256)
    activation: str = "silu"
    time_embedding: str = "sinusoidal"
    frequencies: int = 8

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"Unknown activation: {self.activation}")
        if self.time_embedding not in TIME_EMBEDDINGS:
            raise ArgumentError(f"Unknown time embedding: {self.time_embedding}")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ArgumentError("hidden_widths must be a non-empty list of positive widths")

    def to_dict(self) -> dict:
        return {"hidden_widths": list(self.hidden_widths), "activation": self.activation,
                "time_embedding": self.time_embedding, "frequencies": self.frequencies}


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    output_dir: str = "runs/experiment"
    source_path: str | None = None

    def to_dict(self) -> dict:
        """Resolved configuration, defaults included."""
        return {
            "dataset": self.dataset.to_dict(),
            "schedule": self.schedule.to_dict(),
            "network": self.network.to_dict(),
            "training": self.training.to_dict(),
            "strategy": self.strategy.to_dict(),
            "eval": self.eval.to_dict(),
            "seed": self.seed,
            "output_dir": self.output_dir,
        }


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for number, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return number
    return None


class _Reader:
    """Walks a parsed config, reporting problems against the line of the offending key."""

    def __init__(self, text: str, path: str | None):
        self.text = text
        self.path = path

    def error(self, message: str, key: str | None = None) -> ConfigError:
        return ConfigError(message, self.path, _line_of(self.text, key) if key else None)

    def section(self, data: dict, name: str, allowed) -> dict:
        block = data.get(name, {})
        if block is None:
            return {}
        if not isinstance(block, dict):
            raise self.error(f"'{name}' must be an object", name)
        unknown = sorted(set(block) - set(allowed))
        if unknown:
            raise self.error(f"unknown key '{unknown[0]}' in '{name}'", unknown[0])
        return block

    def build(self, name: str, factory, **kwargs):
        try:
            return factory(**kwargs)
        except (ArgumentError, TypeError, ValueError) as e:
            raise self.error(f"invalid '{name}' block: {e}", name) from e


def _names(cls) -> set[str]:
    return {f.name for f in fields(cls)}


def parse_config(text: str, path: str | None = None, check_files: bool = True) -> ExperimentConfig:
    """Parses config JSON text.

    Args:
        text: JSON document.
        path: File the text came from, used in messages and to resolve relative data paths.
        check_files: Require referenced data files to exist.

    Raises:
        ConfigError: Malformed JSON, unknown keys, invalid values or missing files,
            reported as ``path:line: message``.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", path, e.lineno) from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object", path, 1)
    reader = _Reader(text, path)
    top = {"dataset", "schedule", "network", "training", "strategy", "eval", "seed", "output_dir"}
    unknown = sorted(set(data) - top)
    if unknown:
        raise reader.error(f"unknown key '{unknown[0]}'", unknown[0])

    dataset_block = reader.section(data, "dataset", _names(DatasetConfig))
    split_block = reader.section(dataset_block, "split", _names(SplitSpec))
    split = reader.build("split", SplitSpec, **split_block)
    dataset_kwargs = {k: v for k, v in dataset_block.items() if k != "split"}
    if "modes" in dataset_kwargs:
        try:
            dataset_kwargs["modes"] = tuple((tuple(m), float(s)) for m, s in dataset_kwargs["modes"])
        except (TypeError, ValueError) as e:
            raise reader.error(f"modes must be [[mean...], stdev] pairs: {e}", "modes") from e
    if "weights" in dataset_kwargs:
        dataset_kwargs["weights"] = tuple(dataset_kwargs["weights"])
    dataset = reader.build("dataset", DatasetConfig, split=split, **dataset_kwargs)
    if dataset.source not in SOURCES:
        raise reader.error(f"unknown dataset source '{dataset.source}'", "source")
    if dataset.source in ("idx", "csv"):
        if not dataset.path:
            raise reader.error(f"dataset source '{dataset.source}' needs a path", "source")
        base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
        resolved = {}
        for key in ("path", "labels_path"):
            value = getattr(dataset, key)
            if value is None:
                continue
            full = value if os.path.isabs(value) else os.path.join(base, value)
            if check_files and not os.path.exists(full):
                raise reader.error(f"dataset file not found: {value}", key)
            resolved[key] = full
        dataset = DatasetConfig(**{**{f.name: getattr(dataset, f.name) for f in fields(DatasetConfig)}, **resolved})
    if dataset.source == "csv":
        if not dataset.declaration:
            raise reader.error("csv source needs a column declaration", "source")
        reader.build("declaration", TableDeclaration.from_dict, data=dataset.declaration)

    schedule = reader.build("schedule", ScheduleConfig,
                            **reader.section(data, "schedule", _names(ScheduleConfig)))
    if not 0.0 < schedule.sigma1 < 1.0 or schedule.beta1 <= 0.0 or schedule.train_steps < 1:
        raise reader.error("schedule needs 0 < sigma1 < 1, beta1 > 0 and train_steps >= 1", "schedule")
    network_block = reader.section(data, "network", _names(NetworkConfig))
    if "hidden_widths" in network_block:
        network_block = {**network_block, "hidden_widths": tuple(network_block["hidden_widths"])}
    network = reader.build("network", NetworkConfig, **network_block)
    training = reader.build("training", TrainingConfig,
                            **reader.section(data, "training", _names(TrainingConfig)))
    strategy_block = dict(reader.section(data, "strategy", (_names(StrategyConfig) - {"lam"}) | {"lambda"}))
    if "lambda" in strategy_block:
        strategy_block["lam"] = strategy_block.pop("lambda")
    strategy = reader.build("strategy", StrategyConfig, **strategy_block)
    evaluation = reader.build("eval", EvalConfig, **reader.section(data, "eval", _names(EvalConfig)))

    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < MAX_SEED:
        raise reader.error("seed must be an integer in [0, 2^64)", "seed")
    output_dir = data.get("output_dir", "runs/experiment")
    return ExperimentConfig(dataset, schedule, network, training, strategy, evaluation, seed, output_dir, path)


def load_config(path: str, check_files: bool = True) -> ExperimentConfig:
    if not os.path.exists(path):
        raise ConfigError("config file not found", path)
    with open(path, encoding="utf-8") as handle:
        text = handle.read()
    config = parse_config(text, path, check_files)
    logger.info(f"Loaded config {path} (strategy {config.strategy.kind}, seed {config.seed})")
    return config


def with_overrides(config: ExperimentConfig, seed: int | None = None, output_dir: str | None = None) -> ExperimentConfig:
    """Applies --seed / --out on top of a loaded config."""
    if seed is not None and not 0 <= seed < MAX_SEED:
        raise ConfigError("seed must be an integer in [0, 2^64)", config.source_path)
    return ExperimentConfig(config.dataset, config.schedule, config.network, config.training, config.strategy,
                            config.eval, config.seed if seed is None else seed,
                            config.output_dir if output_dir is None else output_dir, config.source_path)
