"""Dataset ingestion, tabular coding, synthetic generators and task splitting."""
import csv
import gzip
import io
import logging
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from core.bfn import DataSchema, Variable
from core.continual import Task, TaskStream
from core.errors import ArgumentError, FormatError
from core.schedule import CATEGORICAL, CONTINUOUS
from core.storage import atomic_write_text

logger = logging.getLogger('data')

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
UNKNOWN_TOKEN = "<unknown>"
MISSING_TOKENS = ("", "na", "nan", "null", "none", "?")

CLASS_INCREMENTAL = "class_incremental"
ATTRIBUTE = "attribute"


@dataclass(frozen=True)
class Dataset:
    """Rows in schema order plus optional labels and per-row attributes."""

    rows: np.ndarray
    schema: DataSchema
    labels: np.ndarray | None = None
    attributes: dict = field(default_factory=dict)
    codec: "TabularCodec | None" = None
    image_shape: tuple | None = None

    def __post_init__(self):
        rows = self.schema.validate_rows(self.rows) if len(self.rows) else np.zeros((0, self.schema.d_total))
        object.__setattr__(self, "rows", rows)
        if self.labels is not None and len(self.labels) != rows.shape[0]:
            raise ArgumentError(f"{len(self.labels)} labels for {rows.shape[0]} rows")
        for name, values in self.attributes.items():
            if len(values) != rows.shape[0]:
                raise ArgumentError(f"attribute {name!r} has {len(values)} values for {rows.shape[0]} rows")

    def __len__(self) -> int:
        return self.rows.shape[0]

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.rows[index], self.schema,
                       None if self.labels is None else self.labels[index],
                       {k: v[index] for k, v in self.attributes.items()}, self.codec, self.image_shape)


@dataclass(frozen=True)
class SplitSpec:
    mode: str = CLASS_INCREMENTAL
    classes_per_task: int = 2
    column: str | None = None
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.mode not in (CLASS_INCREMENTAL, ATTRIBUTE):
            raise ArgumentError(f"Unknown split mode: {self.mode}")
        if self.mode == CLASS_INCREMENTAL and self.classes_per_task < 1:
            raise ArgumentError("classes_per_task must be at least 1")
        if self.mode == ATTRIBUTE and not self.column:
            raise ArgumentError("attribute split needs a column name")
        if not 0.0 < self.test_fraction < 1.0:
            raise ArgumentError(f"test_fraction must lie in (0, 1), got {self.test_fraction}")


# -------------------------------------------------------------------------
# IDX images
# -------------------------------------------------------------------------

def _open_maybe_gzip(path: str):
    if path.endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def read_idx(path: str, magic: int) -> np.ndarray:
    """Reads an unsigned-byte IDX array, checking its magic number and dimensions."""
    with _open_maybe_gzip(path) as handle:
        data = handle.read()
    if len(data) < 4:
        raise FormatError(f"{path} is too short to be an IDX file")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise FormatError(f"{path} has magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = found & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError(f"{path} is truncated in its dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    if len(data) - header != math.prod(dims):
        raise FormatError(f"{path} holds {len(data) - header} bytes for dimensions {dims}")
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


def binarize(pixels: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Maps intensities in [0, 1] to classes {0, 1}; idempotent on its own output."""
    return (np.asarray(pixels) >= threshold).astype(np.float64)


def downscale_images(images: np.ndarray, side: int) -> np.ndarray:
    """Average-pools (N, H, W) images to (N, side, side)."""
    n, height, width = images.shape
    if height % side or width % side:
        raise ArgumentError(f"cannot pool {height}x{width} images down to {side}x{side}")
    fy, fx = height // side, width // side
    return images.reshape(n, side, fy, side, fx).mean(axis=(2, 4))


def _default_labels_path(path: str) -> str | None:
    candidate = path.replace("images-idx3-ubyte", "labels-idx1-ubyte").replace("images.idx3", "labels.idx1")
    return candidate if candidate != path and os.path.exists(candidate) else None


def load_idx_images(path: str, threshold: float = 0.5, downscale: int | None = 14,
                    labels_path: str | None = None, limit: int | None = None) -> Dataset:
    """Loads IDX images as binarized categorical rows.

    Args:
        path: IDX image file (magic 0x803), optionally gzip-compressed.
        threshold: Binarization threshold on intensities scaled to [0, 1].
        downscale: Output side length after average pooling; None keeps the input size.
        labels_path: IDX label file (magic 0x801). Looked up next to ``path`` when omitted.
        limit: Keep only the first ``limit`` images.

    Returns:
        Dataset of side*side K=2 categorical variables with labels when available.
    """
    if not 0.0 < threshold < 1.0:
        raise ArgumentError(f"threshold must lie in (0, 1), got {threshold}")
    images = read_idx(path, IDX_IMAGES_MAGIC)
    if images.ndim != 3:
        raise FormatError(f"{path} must hold a 3-D image array, found {images.ndim} dimensions")
    labels = None
    labels_path = labels_path or _default_labels_path(path)
    if labels_path:
        labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"{labels.shape[0]} labels for {images.shape[0]} images")
    if limit is not None:
        images = images[:limit]
        labels = labels[:limit] if labels is not None else None
    pixels = images.astype(np.float64) / 255.0
    if downscale is not None and downscale != pixels.shape[1]:
        pixels = downscale_images(pixels, downscale)
    side = pixels.shape[1]
    rows = binarize(pixels, threshold).reshape(pixels.shape[0], -1)
    logger.info(f"Loaded {rows.shape[0]} images from {path} as {side}x{side} binary rows")
    return Dataset(rows, DataSchema.categorical(rows.shape[1], 2, prefix="px"), labels,
                   image_shape=(side, pixels.shape[2]))


# -------------------------------------------------------------------------
# Tabular data
# -------------------------------------------------------------------------

@dataclass(frozen=True)
class TableDeclaration:
    """Which CSV columns become variables, and which are kept as attribute or label."""

    categorical: tuple[str, ...] = ()
    numeric: tuple[str, ...] = ()
    attribute: str | None = None
    label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "categorical", tuple(self.categorical))
        object.__setattr__(self, "numeric", tuple(self.numeric))
        if not self.categorical and not self.numeric:
            raise ArgumentError("a table declaration needs at least one variable column")

    @property
    def columns(self) -> tuple[str, ...]:
        extra = tuple(c for c in (self.attribute, self.label) if c)
        return self.categorical + self.numeric + extra

    def to_dict(self) -> dict:
        return {"categorical": list(self.categorical), "numeric": list(self.numeric),
                "attribute": self.attribute, "label": self.label}

    @classmethod
    def from_dict(cls, data: dict) -> "TableDeclaration":
        return cls(tuple(data.get("categorical", ())), tuple(data.get("numeric", ())),
                   data.get("attribute"), data.get("label"))


@dataclass
class TabularCodec:
    """Integer coding for categorical columns and min/max scaling to [-1, 1] for numeric ones.

    Each categorical column gets K = len(vocabulary) + 1 classes; the last
    class holds values never seen while fitting.
    """

    vocabularies: dict
    ranges: dict

    @classmethod
    def fit(cls, records: list[dict], declaration: TableDeclaration) -> "TabularCodec":
        vocabularies = {}
        for column in declaration.categorical:
            seen = {}
            for record in records:
                seen.setdefault(str(record[column]), len(seen))
            vocabularies[column] = list(seen)
        ranges = {}
        for column in declaration.numeric:
            values = [float(r[column]) for r in records]
            ranges[column] = (min(values), max(values)) if values else (0.0, 0.0)
        return cls(vocabularies, ranges)

    @property
    def columns(self) -> list[str]:
        return list(self.vocabularies) + list(self.ranges)

    def schema(self) -> DataSchema:
        variables = [Variable(c, CATEGORICAL, len(v) + 1) for c, v in self.vocabularies.items()]
        variables += [Variable(c, CONTINUOUS) for c in self.ranges]
        return DataSchema(tuple(variables))

    def encode_value(self, column: str, value) -> float:
        if column in self.vocabularies:
            vocabulary = self.vocabularies[column]
            try:
                return float(vocabulary.index(str(value)))
            except ValueError:
                return float(len(vocabulary))
        low, high = self.ranges[column]
        if high == low:
            return 0.0
        return float(np.clip(2.0 * (float(value) - low) / (high - low) - 1.0, -1.0, 1.0))

    def decode_value(self, column: str, code: float):
        if column in self.vocabularies:
            vocabulary = self.vocabularies[column]
            index = int(round(code))
            return vocabulary[index] if 0 <= index < len(vocabulary) else UNKNOWN_TOKEN
        low, high = self.ranges[column]
        return low + (float(code) + 1.0) * (high - low) / 2.0

    def encode(self, records: list[dict]) -> np.ndarray:
        columns = self.columns
        return np.array([[self.encode_value(c, r[c]) for c in columns] for r in records],
                        dtype=np.float64).reshape(len(records), len(columns))

    def decode(self, rows: np.ndarray) -> list[dict]:
        columns = self.columns
        return [{c: self.decode_value(c, v) for c, v in zip(columns, row)} for row in np.atleast_2d(rows)]

    def to_dict(self) -> dict:
        return {"vocabularies": self.vocabularies, "ranges": {k: list(v) for k, v in self.ranges.items()}}

    @classmethod
    def from_dict(cls, data: dict) -> "TabularCodec":
        return cls({k: list(v) for k, v in data["vocabularies"].items()},
                   {k: (float(v[0]), float(v[1])) for k, v in data["ranges"].items()})


def _is_missing(value) -> bool:
    return value is None or str(value).strip().lower() in MISSING_TOKENS


def _attribute_value(value):
    try:
        return int(value)
    except (TypeError, ValueError):
        return str(value)


def encode_records(records: list[dict], declaration: TableDeclaration, codec: TabularCodec | None = None,
                   source: str = "records") -> Dataset:
    """Drops incomplete records, fits or reuses a codec and builds the dataset."""
    complete = [r for r in records if not any(_is_missing(r.get(c)) for c in declaration.columns)]
    dropped = len(records) - len(complete)
    if dropped:
        logger.warning(f"Dropped {dropped} of {len(records)} rows with missing values from {source}")
    for record in complete:
        for column in declaration.numeric:
            try:
                float(record[column])
            except ValueError:
                raise FormatError(f"{source}: non-numeric value {record[column]!r} in column {column!r}") from None
    codec = codec or TabularCodec.fit(complete, declaration)
    attributes = {}
    if declaration.attribute:
        attributes[declaration.attribute] = np.array([_attribute_value(r[declaration.attribute]) for r in complete])
    labels = None
    if declaration.label:
        labels = np.array([_attribute_value(r[declaration.label]) for r in complete])
    return Dataset(codec.encode(complete), codec.schema(), labels, attributes, codec)


def load_csv_tabular(path: str, declaration: TableDeclaration, codec: TabularCodec | None = None) -> Dataset:
    """Reads a CSV with a header row into a coded tabular dataset.

    Args:
        path: CSV file.
        declaration: Columns to use.
        codec: Existing coding to reuse; fitted on this file when omitted.
            Categories the codec has not seen map to the unknown class.
    """
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        header = reader.fieldnames or []
        missing = [c for c in declaration.columns if c not in header]
        if missing:
            raise FormatError(f"{path}: declared columns not in header: {', '.join(missing)}")
        records = list(reader)
    return encode_records(records, declaration, codec, source=path)


def write_records_csv(path: str, records: list[dict], columns: list[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    writer.writerows(records)
    return atomic_write_text(path, buffer.getvalue())


# -------------------------------------------------------------------------
# Synthetic generators
# -------------------------------------------------------------------------

def synthetic_mixture(n_rows: int, modes, weights, rng) -> Dataset:
    """Continuous rows from a Gaussian mixture, clipped to [-1, 1], labelled by mode.

    Args:
        n_rows: Number of rows.
        modes: Sequence of (mean vector, stdev).
        weights: Mixture weights on the simplex.
        rng: numpy Generator.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(modes) != weights.size or np.any(weights < 0.0) or not math.isclose(weights.sum(), 1.0, abs_tol=1e-9):
        raise ArgumentError("weights must be a probability vector with one entry per mode")
    means = np.array([np.atleast_1d(np.asarray(m, dtype=np.float64)) for m, _ in modes])
    stdevs = np.array([float(s) for _, s in modes])
    labels = rng.choice(len(modes), size=n_rows, p=weights)
    noise = rng.standard_normal((n_rows, means.shape[1]))
    rows = np.clip(means[labels] + stdevs[labels, None] * noise, -1.0, 1.0)
    return Dataset(rows, DataSchema.continuous(means.shape[1]), labels.astype(np.int64))


FLIGHT_CATEGORICAL = {
    "airline": ["AA", "DL", "UA", "WN", "B6", "AS", "NK", "F9"],
    "origin": ["ATL", "ORD", "DFW", "DEN", "LAX", "JFK", "SFO", "SEA", "LAS", "MCO"],
    "destination": ["ATL", "ORD", "DFW", "DEN", "LAX", "JFK", "SFO", "SEA", "LAS", "MCO"],
    "day_of_week": ["Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun"],
    "departure_block": ["night", "morning", "afternoon", "evening"],
}
FLIGHT_NUMERIC = ("distance", "departure_delay", "arrival_delay", "taxi_out", "taxi_in", "air_time",
                  "elapsed_time", "weather_delay", "carrier_delay")
FLIGHT_DECLARATION = TableDeclaration(tuple(FLIGHT_CATEGORICAL), FLIGHT_NUMERIC, attribute="month")


def flight_records(n_rows: int, rng) -> list[dict]:
    """Synthetic flight records with a month column; delays and taxi times drift with the season."""
    records = []
    months = rng.integers(1, 13, size=n_rows)
    for month in months:
        season = math.cos(2.0 * math.pi * (month - 1) / 12.0)
        winter = max(season, 0.0)
        summer = max(-season, 0.0)
        record = {name: values[int(rng.integers(0, len(values)))] for name, values in FLIGHT_CATEGORICAL.items()}
        if month in (6, 7, 8):
            record["destination"] = ["LAS", "MCO", "SEA"][int(rng.integers(0, 3))]
        distance = float(rng.uniform(200.0, 2600.0))
        air_time = distance / 8.0 + float(rng.normal(0.0, 8.0))
        taxi_out = 12.0 + 8.0 * winter + float(rng.gamma(2.0, 2.0))
        taxi_in = 6.0 + 3.0 * winter + float(rng.gamma(2.0, 1.0))
        weather = float(rng.gamma(1.0 + 4.0 * winter, 3.0))
        carrier = float(rng.gamma(1.5 + 2.0 * summer, 4.0))
        departure = weather + carrier + float(rng.normal(0.0, 5.0))
        record.update({
            "distance": round(distance, 3),
            "departure_delay": round(departure, 3),
            "arrival_delay": round(departure + taxi_out + taxi_in - 20.0 + float(rng.normal(0.0, 4.0)), 3),
            "taxi_out": round(taxi_out, 3),
            "taxi_in": round(taxi_in, 3),
            "air_time": round(air_time, 3),
            "elapsed_time": round(air_time + taxi_out + taxi_in, 3),
            "weather_delay": round(weather, 3),
            "carrier_delay": round(carrier, 3),
            "month": int(month),
        })
        records.append(record)
    return records


def synthetic_flights(n_rows: int, rng) -> Dataset:
    """5 categorical and 9 numeric flight columns, with ``month`` kept as an attribute."""
    return encode_records(flight_records(n_rows, rng), FLIGHT_DECLARATION, source="synthetic flights")


def write_flights_csv(path: str, n_rows: int, rng) -> str:
    return write_records_csv(path, flight_records(n_rows, rng), list(FLIGHT_DECLARATION.columns))


# -------------------------------------------------------------------------
# Task splitting
# -------------------------------------------------------------------------

def _train_test(index: np.ndarray, test_fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    index = rng.permutation(index)
    n_test = min(int(round(test_fraction * index.size)), index.size - 1)
    return np.sort(index[n_test:]), np.sort(index[:n_test])


def _split_index(dataset: Dataset, spec: SplitSpec) -> list[tuple[str, tuple, np.ndarray, np.ndarray]]:
    """Seeded (name, group, train index, test index) per task, in task order."""
    if spec.mode == CLASS_INCREMENTAL:
        if dataset.labels is None:
            raise ArgumentError("class-incremental split needs labels")
        keys = dataset.labels
        classes = [c.item() for c in np.unique(keys)]
        if len(classes) % spec.classes_per_task:
            logger.warning(f"{len(classes)} classes do not divide into groups of {spec.classes_per_task}; "
                           f"the last task is smaller")
        groups = [tuple(classes[i:i + spec.classes_per_task])
                  for i in range(0, len(classes), spec.classes_per_task)]
        names = ["classes_" + "_".join(str(c) for c in g) for g in groups]
    else:
        if spec.column not in dataset.attributes:
            raise ArgumentError(f"dataset has no attribute column {spec.column!r}")
        keys = dataset.attributes[spec.column]
        groups = [(v.item(),) for v in np.unique(keys)]
        names = [f"{spec.column}_{g[0]}" for g in groups]
    rng = np.random.default_rng(spec.seed)
    splits = []
    for name, group in zip(names, groups):
        index = np.flatnonzero(np.isin(keys, group))
        splits.append((name, group, *_train_test(index, spec.test_fraction, rng)))
    return splits


def split_tasks(dataset: Dataset, spec: SplitSpec) -> TaskStream:
    """Splits a dataset into a task stream.

    class_incremental groups consecutive sorted labels ``classes_per_task`` at a
    time; attribute makes one task per distinct attribute value in sorted order.
    Each task gets a seeded train/test split.
    """
    tasks = []
    for name, group, train, test in _split_index(dataset, spec):
        tasks.append(Task(name, dataset.rows[train], dataset.rows[test], group))
        logger.info(f"Task {name}: {train.size} train rows, {test.size} test rows")
    return TaskStream(tuple(tasks), dataset.schema)


def fit_codec_on_training_rows(dataset: Dataset, spec: SplitSpec) -> Dataset:
    """Refits a tabular dataset's codec on the rows that land in some task's train split.

    Vocabularies and numeric ranges then never see held-out rows; test-only
    categories map to the unknown class and test values outside the training
    range are clipped. Datasets without a codec come back unchanged. The split
    itself depends only on the labels or attribute and the seed, so it is the
    same before and after the refit.
    """
    if dataset.codec is None:
        return dataset
    splits = _split_index(dataset, spec)
    train = np.sort(np.concatenate([s[2] for s in splits])) if splits else np.zeros(0, dtype=np.int64)
    declaration = TableDeclaration(tuple(dataset.codec.vocabularies), tuple(dataset.codec.ranges))
    codec = TabularCodec.fit(dataset.codec.decode(dataset.subset(train).rows), declaration)
    rows = codec.encode(dataset.codec.decode(dataset.rows))
    logger.debug(f"Codec fitted on {train.size} of {len(dataset)} rows")
    return Dataset(rows, codec.schema(), dataset.labels, dataset.attributes, codec, dataset.image_shape)
