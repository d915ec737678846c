"""Small feedforward network with time conditioning, hand-written backward pass and optimizers."""
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from core.errors import ArgumentError, DomainError, FormatError, NumericError, ShapeError
from core.storage import atomic_write_bytes

logger = logging.getLogger('model')

ACTIVATIONS = ("tanh", "relu", "silu")
TIME_EMBEDDINGS = ("scalar-concat", "sinusoidal")
OPTIMIZERS = ("sgd", "adam")

CHECKPOINT_MAGIC = b"BFNCKPT1"

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class NetworkSpec:
    """Shape of the network.

    ``input_width`` counts the data-side inputs only; the time embedding is
    appended inside ``forward``. The first ``squashed_outputs`` outputs pass
    through tanh, the rest are raw scores.
    """

    input_width: int
    hidden_widths: tuple[int, ...]
    output_width: int
    activation: str = "silu"
    time_embedding: str = "sinusoidal"
    frequencies: int = 8
    squashed_outputs: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_width < 1 or self.output_width < 1:
            raise ArgumentError("input_width and output_width must be at least 1")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ArgumentError("at least one hidden layer of width >= 1 is required")
        if self.activation not in ACTIVATIONS:
            raise ArgumentError(f"Unknown activation: {self.activation}")
        if self.time_embedding not in TIME_EMBEDDINGS:
            raise ArgumentError(f"Unknown time embedding: {self.time_embedding}")
        if self.time_embedding == "sinusoidal" and self.frequencies < 1:
            raise ArgumentError("sinusoidal embedding needs at least one frequency")
        if not 0 <= self.squashed_outputs <= self.output_width:
            raise ArgumentError("squashed_outputs must lie in [0, output_width]")

    @property
    def embedding_width(self) -> int:
        return 1 if self.time_embedding == "scalar-concat" else 2 * self.frequencies

    def layer_sizes(self) -> list[int]:
        return [self.input_width + self.embedding_width, *self.hidden_widths, self.output_width]

    def layout(self) -> tuple:
        sizes = self.layer_sizes()
        entries = []
        for index, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            entries.append((f"layer{index}.weight", (fan_in, fan_out)))
            entries.append((f"layer{index}.bias", (fan_out,)))
        return tuple(entries)

    @property
    def parameter_count(self) -> int:
        return sum(math.prod(shape) for _, shape in self.layout())

    def to_dict(self) -> dict:
        return {
            "input_width": self.input_width,
            "hidden_widths": list(self.hidden_widths),
            "output_width": self.output_width,
            "activation": self.activation,
            "time_embedding": self.time_embedding,
            "frequencies": self.frequencies,
            "squashed_outputs": self.squashed_outputs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        return cls(**data)


@dataclass
class ParameterVector:
    """Flat float64 parameters plus the (name, shape) manifest describing them."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64).reshape(-1)
        self.layout = tuple((name, tuple(int(s) for s in shape)) for name, shape in self.layout)
        expected = sum(math.prod(shape) for _, shape in self.layout)
        if self.values.size != expected:
            raise ShapeError(f"{self.values.size} values for a layout of {expected} parameters")
        if not np.all(np.isfinite(self.values)):
            raise NumericError("parameters contain non-finite values")

    def __len__(self) -> int:
        return self.values.size

    def arrays(self) -> dict[str, np.ndarray]:
        """Named views into ``values``."""
        out, offset = {}, 0
        for name, shape in self.layout:
            size = math.prod(shape)
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def zeros_like(self) -> "ParameterVector":
        return ParameterVector(np.zeros_like(self.values), self.layout)

    def check_layout(self, other: "ParameterVector"):
        if self.layout != other.layout:
            raise ShapeError("parameter layouts differ")

    @classmethod
    def from_arrays(cls, layout, arrays: dict) -> "ParameterVector":
        return cls(np.concatenate([np.asarray(arrays[name], dtype=np.float64).reshape(-1)
                                   for name, _ in layout]), layout)

    def to_bytes(self) -> bytes:
        return self.values.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, layout) -> "ParameterVector":
        return cls(np.frombuffer(data, dtype="<f8").astype(np.float64), layout)


def init_parameters(spec: NetworkSpec, rng: np.random.Generator, zero: bool = False) -> ParameterVector:
    """Gaussian fan-in initialisation for weights, zeros for biases.

    Args:
        spec: Network shape.
        rng: Random generator.
        zero: Return all-zero parameters instead.
    """
    layout = spec.layout()
    if zero:
        return ParameterVector(np.zeros(spec.parameter_count), layout)
    gain = 2.0 if spec.activation == "relu" else 1.0
    arrays = {}
    for name, shape in layout:
        if name.endswith(".weight"):
            arrays[name] = rng.standard_normal(shape) * math.sqrt(gain / shape[0])
        else:
            arrays[name] = np.zeros(shape)
    return ParameterVector.from_arrays(layout, arrays)


def _activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(a)
    if kind == "relu":
        return np.maximum(a, 0.0)
    return a * _sigmoid(a)


def _activation_grad(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - np.tanh(a) ** 2
    if kind == "relu":
        return (a > 0.0).astype(np.float64)
    s = _sigmoid(a)
    return s * (1.0 + a * (1.0 - s))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def time_embedding(spec: NetworkSpec, t: np.ndarray) -> np.ndarray:
    """(R,) times -> (R, embedding_width) features."""
    if spec.time_embedding == "scalar-concat":
        return t[:, None]
    freqs = math.pi * 2.0 ** np.arange(spec.frequencies)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@dataclass
class ForwardCache:
    """Intermediate values kept by forward for the backward pass."""

    layer_inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    output: np.ndarray | None = None
    single: bool = False


def _prepare(spec: NetworkSpec, xi, t):
    xi = np.asarray(xi, dtype=np.float64)
    single = xi.ndim == 1
    if single:
        xi = xi[None, :]
    if xi.ndim != 2 or xi.shape[1] != spec.input_width:
        raise ShapeError(f"network input width {xi.shape[-1]} != spec input_width {spec.input_width}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        t = np.full(xi.shape[0], float(t))
    if t.shape != (xi.shape[0],):
        raise ShapeError(f"time shape {t.shape} does not match {xi.shape[0]} rows")
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("t must lie in [0, 1]")
    return xi, t, single


def forward_cached(spec: NetworkSpec, params: ParameterVector, xi, t) -> tuple[np.ndarray, ForwardCache]:
    """Forward pass that also returns the cache needed by ``backward_cached``."""
    xi, t, single = _prepare(spec, xi, t)
    weights = params.arrays()
    n_layers = len(spec.hidden_widths) + 1
    h = np.concatenate([xi, time_embedding(spec, t)], axis=1)
    cache = ForwardCache(single=single)
    for index in range(n_layers - 1):
        cache.layer_inputs.append(h)
        a = h @ weights[f"layer{index}.weight"] + weights[f"layer{index}.bias"]
        cache.pre_activations.append(a)
        h = _activate(spec.activation, a)
    cache.layer_inputs.append(h)
    last = n_layers - 1
    out = h @ weights[f"layer{last}.weight"] + weights[f"layer{last}.bias"]
    if spec.squashed_outputs:
        out[:, :spec.squashed_outputs] = np.tanh(out[:, :spec.squashed_outputs])
    if not np.all(np.isfinite(out)):
        raise NumericError("network produced non-finite activations")
    cache.output = out
    return (out[0] if single else out), cache


def forward(spec: NetworkSpec, params: ParameterVector, xi, t) -> np.ndarray:
    """Network output for one input row (1-D) or a batch of rows (2-D).

    Args:
        spec: Network shape.
        params: Parameters laid out as ``spec.layout()``.
        xi: Input of width ``spec.input_width``.
        t: Time in [0, 1], scalar or one per row.

    Returns:
        Outputs of width ``spec.output_width``; squashed outputs lie in [-1, 1].
    """
    return forward_cached(spec, params, xi, t)[0]


def backward_cached(spec: NetworkSpec, params: ParameterVector, cache: ForwardCache, upstream) -> ParameterVector:
    """Reverse-mode gradient of sum(upstream * output), summed over rows."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if cache.single and upstream.ndim == 1:
        upstream = upstream[None, :]
    if upstream.shape != cache.output.shape:
        raise ShapeError(f"upstream gradient shape {upstream.shape} != output shape {cache.output.shape}")
    weights = params.arrays()
    grads = {}
    delta = upstream.copy()
    s = spec.squashed_outputs
    if s:
        delta[:, :s] *= 1.0 - cache.output[:, :s] ** 2
    last = len(spec.hidden_widths)
    grads[f"layer{last}.weight"] = cache.layer_inputs[last].T @ delta
    grads[f"layer{last}.bias"] = delta.sum(axis=0)
    dh = delta @ weights[f"layer{last}.weight"].T
    for index in reversed(range(last)):
        da = dh * _activation_grad(spec.activation, cache.pre_activations[index])
        grads[f"layer{index}.weight"] = cache.layer_inputs[index].T @ da
        grads[f"layer{index}.bias"] = da.sum(axis=0)
        if index:
            dh = da @ weights[f"layer{index}.weight"].T
    gradient = ParameterVector.from_arrays(params.layout, grads)
    return gradient


def backward(spec: NetworkSpec, params: ParameterVector, xi, t, upstream) -> ParameterVector:
    """Gradient of sum(upstream * forward(spec, params, xi, t)) with respect to params."""
    _, cache = forward_cached(spec, params, xi, t)
    return backward_cached(spec, params, cache, upstream)


@dataclass
class OptimizerState:
    """SGD or Adam state; Adam moments are allocated on creation."""

    kind: str
    learning_rate: float
    first_moment: np.ndarray | None = None
    second_moment: np.ndarray | None = None
    step: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ArgumentError(f"Unknown optimizer: {self.kind}")
        if not self.learning_rate > 0.0:
            raise ArgumentError("learning_rate must be positive")

    @classmethod
    def create(cls, kind: str, learning_rate: float, parameter_count: int,
               clip_norm: float | None = None) -> "OptimizerState":
        if kind == "adam":
            return cls(kind, float(learning_rate), np.zeros(parameter_count), np.zeros(parameter_count),
                       clip_norm=clip_norm)
        return cls(kind, float(learning_rate), clip_norm=clip_norm)


def optimizer_step(state: OptimizerState, params: ParameterVector,
                   gradient: ParameterVector) -> tuple[OptimizerState, ParameterVector]:
    """Applies one update and returns the new state and parameters; inputs are not modified."""
    params.check_layout(gradient)
    g = gradient.values
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient contains non-finite values; step rejected")
    if state.clip_norm:
        norm = float(np.linalg.norm(g))
        if norm > state.clip_norm:
            g = g * (state.clip_norm / norm)
    step = state.step + 1
    if state.kind == "sgd":
        new_values = params.values - state.learning_rate * g
        new_state = OptimizerState("sgd", state.learning_rate, step=step, clip_norm=state.clip_norm)
    else:
        if state.first_moment is None or state.first_moment.size != g.size:
            raise ShapeError("Adam moments do not match the parameter count")
        m = ADAM_BETA1 * state.first_moment + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.second_moment + (1.0 - ADAM_BETA2) * g * g
        m_hat = m / (1.0 - ADAM_BETA1 ** step)
        v_hat = v / (1.0 - ADAM_BETA2 ** step)
        new_values = params.values - state.learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_state = OptimizerState("adam", state.learning_rate, m, v, step, state.clip_norm)
    return new_state, ParameterVector(new_values, params.layout)


def write_checkpoint(path: str, manifest: dict, params: ParameterVector) -> str:
    """Writes magic, manifest length (u64 LE), JSON manifest, then float64 LE parameters."""
    body = dict(manifest)
    body["layout"] = [[name, list(shape)] for name, shape in params.layout]
    encoded = json.dumps(body, sort_keys=True).encode("utf-8")
    payload = CHECKPOINT_MAGIC + struct.pack("<Q", len(encoded)) + encoded + params.to_bytes()
    return atomic_write_bytes(path, payload)


def read_checkpoint(path: str) -> tuple[dict, ParameterVector]:
    """Reads a checkpoint written by ``write_checkpoint``.

    Raises:
        FormatError: Bad magic, truncated file or parameter count mismatch.
    """
    with open(path, "rb") as handle:
        data = handle.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a flowrecall checkpoint (bad magic)")
    if len(data) < 16:
        raise FormatError(f"{path} is truncated")
    (length,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16:16 + length].decode("utf-8"))
        layout = tuple((name, tuple(shape)) for name, shape in manifest["layout"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, ValueError) as e:
        raise FormatError(f"{path} has an unreadable manifest: {e}") from e
    raw = data[16 + length:]
    expected = sum(math.prod(shape) for _, shape in layout) * 8
    if len(raw) != expected:
        raise FormatError(f"{path} holds {len(raw)} parameter bytes, expected {expected}")
    return manifest, ParameterVector.from_bytes(raw, layout)
