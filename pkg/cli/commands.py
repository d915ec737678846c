"""Subcommands of the flowrecall command line and their exit codes."""
import argparse
import json
import logging
import os

import numpy as np

from cli.config import MAX_SEED, ExperimentConfig, load_config, with_overrides
from core.bfn import FlowNetwork, sample_rows
from core.continual import StrategyConfig, Task, TaskStream, run_scenario
from core.data import (CLASS_INCREMENTAL, Dataset, TableDeclaration, TabularCodec, fit_codec_on_training_rows,
                       load_csv_tabular, load_idx_images, split_tasks, synthetic_flights, synthetic_mixture)
from core.errors import (ArgumentError, ConfigError, DomainError, FlowRecallError, FormatError, ScenarioAborted,
                         ShapeError, UnsupportedSchemaError)
from core.evaluation import ScenarioEvaluator, forgetting_summary, train_probe, with_forgetting
from core.model import read_checkpoint
from core.reporting import (export_plot_tables, read_metrics_json, write_loss_log, write_metrics_csv,
                            write_metrics_json, write_sample_grid, write_samples_csv)
from core.storage import atomic_write_json, sha256_file

logger = logging.getLogger('cli')

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2

INVALID_INPUT = (ConfigError, FormatError, ArgumentError, ShapeError, UnsupportedSchemaError, DomainError,
                 FileNotFoundError)


class SeedStreams:
    """Independent generators spawned from one experiment seed."""

    NAMES = ("data", "init", "train", "eval", "probe")

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(len(self.NAMES))
        self.sequences = dict(zip(self.NAMES, children))

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.sequences[name])

    def sequence(self, name: str) -> np.random.SeedSequence:
        return self.sequences[name]

    def integer(self, name: str) -> int:
        return int(self.sequences[name].generate_state(1, dtype=np.uint64)[0])


def load_dataset(config: ExperimentConfig, streams: SeedStreams) -> Dataset:
    """Builds or reads the configured dataset; tabular codecs are fitted on training rows only."""
    source = config.dataset
    if source.source == "mixture":
        return synthetic_mixture(source.n_rows, source.modes, source.weights, streams.rng("data"))
    if source.source == "flights":
        dataset = synthetic_flights(source.n_rows, streams.rng("data"))
    elif source.source == "idx":
        return load_idx_images(source.path, source.threshold, source.downscale, source.labels_path, source.limit)
    else:
        dataset = load_csv_tabular(source.path, TableDeclaration.from_dict(source.declaration))
    return fit_codec_on_training_rows(dataset, source.split)


def build_network(config: ExperimentConfig, dataset: Dataset, streams: SeedStreams) -> FlowNetwork:
    schedule = config.schedule.flow_schedule(dataset.schema)
    net = config.network
    return FlowNetwork.create(dataset.schema, schedule, net.hidden_widths, net.activation, net.time_embedding,
                              net.frequencies, streams.rng("init"), prior_precision=config.schedule.prior_precision)


def _manifest_extra(config: ExperimentConfig, dataset: Dataset, class_labels=None) -> dict:
    return {
        "seed": config.seed,
        "sample_steps": config.eval.sample_steps,
        "categorical_mode": config.eval.categorical_mode,
        "codec": dataset.codec.to_dict() if dataset.codec is not None else None,
        "image_shape": list(dataset.image_shape) if dataset.image_shape else None,
        "class_labels": class_labels,
    }


def _input_entry(path: str) -> dict:
    return {"path": os.path.abspath(path), "sha256": sha256_file(path)}


def _config_inputs(config: ExperimentConfig) -> dict:
    inputs = {}
    if config.source_path is not None:
        inputs["config"] = _input_entry(config.source_path)
    for key in ("path", "labels_path"):
        value = getattr(config.dataset, key)
        if config.dataset.source in ("idx", "csv") and value:
            inputs[f"dataset_{key}"] = _input_entry(value)
    return inputs


def _read_manifest(path: str) -> dict | None:
    if not os.path.exists(path):
        return None
    try:
        with open(path, encoding="utf-8") as handle:
            payload = json.load(handle)
    except (OSError, json.JSONDecodeError) as e:
        logger.warning(f"Replacing unreadable manifest {path}: {e}")
        return None
    return payload if isinstance(payload, dict) else None


def _write_run_manifest(out_dir: str, command: str, artifacts: list[str], config: ExperimentConfig | None = None,
                        seed: int | None = None, inputs: dict | None = None, settings: dict | None = None) -> str:
    """Writes ``manifest.json`` for one command run.

    A manifest left in ``out_dir`` by a different command is kept; this run is
    then recorded under its ``derived`` entry.
    """
    entry = {"command": command, "seed": seed, "inputs": inputs or {}}
    if config is not None:
        entry["config"] = config.to_dict()
    if settings:
        entry["settings"] = settings
    entry["artifacts"] = {os.path.relpath(p, out_dir): sha256_file(p) for p in sorted(artifacts)}
    path = os.path.join(out_dir, "manifest.json")
    existing = _read_manifest(path)
    if existing is not None and existing.get("command") != command:
        existing.setdefault("derived", {})[command] = entry
        entry = existing
    return atomic_write_json(path, entry)


def _check_seed(seed) -> int:
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < MAX_SEED:
        raise ArgumentError(f"seed must be an integer in [0, 2^64), got {seed}")
    return seed


def _probe_for(config: ExperimentConfig, dataset: Dataset, streams: SeedStreams):
    if dataset.labels is None or config.dataset.split.mode != CLASS_INCREMENTAL:
        return None
    return train_probe(dataset.rows, dataset.labels, config.eval.probe, streams.rng("probe"),
                       holdout_fraction=config.eval.holdout_fraction, accuracy_floor=config.eval.accuracy_floor)


def _class_labels(probe) -> list | None:
    return [c.item() for c in probe.classes] if probe is not None else None


def _write_metrics(out_dir: str, records: list, class_labels) -> list[str]:
    summary = {"class_labels": class_labels}
    if records and len(records) == len(records[-1].loss_matrix_row):
        forgetting = forgetting_summary([r.loss_matrix_row for r in records])
        summary["forgetting"] = list(forgetting.per_task)
        summary["mean_forgetting"] = forgetting.mean
    return [write_metrics_csv(os.path.join(out_dir, "metrics.csv"), records),
            write_metrics_json(os.path.join(out_dir, "metrics.json"), records, summary)]


def cmd_run_scenario(args) -> int:
    """Runs a full continual-learning scenario and writes its artifacts under the output directory."""
    config = with_overrides(load_config(args.config), args.seed, args.out)
    out_dir = config.output_dir
    streams = SeedStreams(config.seed)
    dataset = load_dataset(config, streams)
    stream = split_tasks(dataset, config.dataset.split)
    net = build_network(config, dataset, streams)
    probe = _probe_for(config, dataset, streams)
    labels = _class_labels(probe)
    evaluator = ScenarioEvaluator(stream, config.eval, streams.integer("eval"), probe)
    try:
        result = run_scenario(stream, net, config.strategy, config.training, streams.sequence("train"), evaluator,
                              os.path.join(out_dir, "checkpoints"), _manifest_extra(config, dataset, labels))
    except ScenarioAborted as e:
        artifacts = _write_metrics(out_dir, e.records, labels)
        _write_run_manifest(out_dir, "run-scenario", artifacts, config, config.seed, _config_inputs(config))
        raise
    records = with_forgetting(result.records)
    artifacts = _write_metrics(out_dir, records, labels) + result.checkpoints
    columns = dataset.schema.names
    for index in sorted(evaluator.samples):
        path = os.path.join(out_dir, f"samples_task_{index}.csv")
        artifacts.append(write_samples_csv(path, evaluator.samples[index], columns, dataset.codec))
    if dataset.image_shape is not None:
        grid = [evaluator.samples[i] for i in sorted(evaluator.samples)]
        artifacts.append(write_sample_grid(os.path.join(out_dir, "samples_grid.png"), grid, dataset.image_shape,
                                           config.eval.grid_columns))
    artifacts.append(write_loss_log(os.path.join(out_dir, "loss_log.csv"), result.losses))
    _write_run_manifest(out_dir, "run-scenario", artifacts, config, config.seed, _config_inputs(config))
    print(f"Scenario finished: {len(records)} tasks, outputs in {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    """Plain single-task training on the union of every task's splits."""
    config = with_overrides(load_config(args.config), args.seed, args.out)
    out_dir = config.output_dir
    streams = SeedStreams(config.seed)
    dataset = load_dataset(config, streams)
    tasks = split_tasks(dataset, config.dataset.split).tasks
    union = Task("all", np.concatenate([t.train for t in tasks]), np.concatenate([t.test for t in tasks]))
    stream = TaskStream((union,), dataset.schema)
    net = build_network(config, dataset, streams)
    result = run_scenario(stream, net, StrategyConfig.finetune(), config.training, streams.sequence("train"),
                          checkpoint_dir=out_dir, manifest_extra=_manifest_extra(config, dataset))
    artifacts = result.checkpoints + [write_loss_log(os.path.join(out_dir, "loss_log.csv"), result.losses)]
    _write_run_manifest(out_dir, "train", artifacts, config, config.seed, _config_inputs(config))
    print(f"Training finished, checkpoint {result.checkpoints[-1]}")
    return EXIT_OK


def _load_network(path: str) -> tuple[dict, FlowNetwork]:
    manifest, params = read_checkpoint(path)
    try:
        return manifest, FlowNetwork.from_manifest(manifest, params)
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path} has an incomplete manifest: {e}") from e


def cmd_generate(args) -> int:
    """Writes ``--count`` generated rows from a checkpoint to CSV."""
    if args.count < 0:
        raise ArgumentError("--count must be non-negative")
    if args.seed is not None:
        _check_seed(args.seed)
    manifest, net = _load_network(args.checkpoint)
    steps = args.steps or manifest.get("sample_steps", 100)
    seed = _check_seed(args.seed if args.seed is not None else manifest.get("seed", 0))
    categorical_mode = manifest.get("categorical_mode", "argmax")
    samples = sample_rows(net, net.schedule, net.schema, np.random.default_rng(seed), args.count, steps,
                          categorical_mode)
    codec = TabularCodec.from_dict(manifest["codec"]) if manifest.get("codec") else None
    out = write_samples_csv(args.out, samples, net.schema.names, codec)
    _write_run_manifest(os.path.dirname(os.path.abspath(out)), "generate", [os.path.abspath(out)], seed=seed,
                        inputs={"checkpoint": _input_entry(args.checkpoint)},
                        settings={"count": args.count, "steps": steps, "categorical_mode": categorical_mode})
    print(f"Wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    """Scores one checkpoint: loss-matrix row over every task and class shares of its samples."""
    config = load_config(args.config)
    if args.seed is not None:
        config = with_overrides(config, seed=args.seed)
    streams = SeedStreams(config.seed)
    dataset = load_dataset(config, streams)
    stream = split_tasks(dataset, config.dataset.split)
    manifest, net = _load_network(args.checkpoint)
    if net.schema != dataset.schema:
        raise ShapeError("checkpoint schema does not match the configured dataset")
    probe = _probe_for(config, dataset, streams)
    evaluator = ScenarioEvaluator(stream, config.eval, streams.integer("eval"), probe)
    record = evaluator(net, int(manifest.get("task_index", 0)))
    payload = {"checkpoint": os.path.basename(args.checkpoint), "class_labels": _class_labels(probe),
               "record": record.to_dict()}
    out = os.path.abspath(args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)),
                                                   "evaluation.json"))
    atomic_write_json(out, payload)
    inputs = {"checkpoint": _input_entry(args.checkpoint), **_config_inputs(config)}
    _write_run_manifest(os.path.dirname(out), "evaluate", [out], config, config.seed, inputs)
    print(f"Evaluation written to {out}")
    return EXIT_OK


def cmd_export_plots(args) -> int:
    """Melts metrics.json into long-format tables for the share and loss-matrix plots."""
    records = read_metrics_json(args.metrics)
    with open(args.metrics, encoding="utf-8") as handle:
        labels = json.load(handle).get("summary", {}).get("class_labels")
    out_dir = os.path.abspath(args.out or os.path.dirname(os.path.abspath(args.metrics)))
    shares, matrix = export_plot_tables(records, os.path.join(out_dir, "plot_class_shares.csv"),
                                        os.path.join(out_dir, "plot_loss_matrix.csv"), labels)
    _write_run_manifest(out_dir, "export-plots", [shares, matrix], inputs={"metrics": _input_entry(args.metrics)})
    print(f"Wrote {shares} and {matrix}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowrecall",
                                     description="Bayesian Flow Networks under continual learning.")
    parser.add_argument("--verbose", action="store_true", help="log progress at INFO level")
    parser.add_argument("--debug", action="store_true", help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run-scenario", help="train over a task stream and record per-task metrics")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.set_defaults(handler=cmd_run_scenario)

    train = sub.add_parser("train", help="single-task training on all tasks' data")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int)
    train.add_argument("--out")
    train.set_defaults(handler=cmd_train)

    generate = sub.add_parser("generate", help="sample rows from a checkpoint")
    generate.add_argument("--checkpoint", required=True)
    generate.add_argument("--count", type=int, default=1000)
    generate.add_argument("--out", required=True)
    generate.add_argument("--seed", type=int)
    generate.add_argument("--steps", type=int, help="sampling steps (default: the checkpoint's)")
    generate.set_defaults(handler=cmd_generate)

    evaluate = sub.add_parser("evaluate", help="score a checkpoint against a config's task stream")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--config", required=True)
    evaluate.add_argument("--seed", type=int)
    evaluate.add_argument("--out")
    evaluate.set_defaults(handler=cmd_evaluate)

    export = sub.add_parser("export-plots", help="write long-format plot tables from metrics.json")
    export.add_argument("--metrics", required=True)
    export.add_argument("--out")
    export.set_defaults(handler=cmd_export_plots)
    return parser


def dispatch(args) -> int:
    """Runs the selected subcommand and maps failures to exit codes."""
    try:
        return args.handler(args)
    except INVALID_INPUT as e:
        logger.error(f"Error in {args.command}: {e}")
        return EXIT_INVALID
    except (FlowRecallError, ArithmeticError, OSError) as e:
        logger.error(f"Error in {args.command}: {e}")
        return EXIT_RUNTIME


def run(argv=None) -> int:
    return dispatch(build_parser().parse_args(argv))
