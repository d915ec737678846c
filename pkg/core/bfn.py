"""Sender/receiver construction, training losses and the generative sampler.

Rows are float arrays in schema order: continuous variables hold values in
[-1, 1], categorical variables hold class indices. Internally continuous
variables are gathered into one Gaussian belief and categorical variables into
one simplex block per distinct class count K.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from core.errors import ArgumentError, ShapeError, UnsupportedSchemaError
from core.flow import (CategoricalParams, GaussianParams, NoisySample, categorical_flow, categorical_update,
                       expand_to, gaussian_flow, gaussian_update, log_normalize)
from core.model import (NetworkSpec, ParameterVector, backward_cached, forward_cached, init_parameters)
from core.schedule import CATEGORICAL, CONTINUOUS, FlowSchedule, beta, step_alphas

logger = logging.getLogger('bfn')

LN2 = math.log(2.0)
RESCALE_FLOOR = 1e-3
PROB_FLOOR = 1e-30


@dataclass(frozen=True)
class Variable:
    name: str
    kind: str
    n_classes: int = 0

    def __post_init__(self):
        if self.kind not in (CONTINUOUS, CATEGORICAL):
            raise ArgumentError(f"Unknown variable kind: {self.kind}")
        if self.kind == CATEGORICAL and self.n_classes < 2:
            raise ArgumentError(f"categorical variable {self.name!r} needs K >= 2, got {self.n_classes}")


@dataclass(frozen=True)
class CategoricalGroup:
    """Categorical variables sharing one class count, by schema position."""

    n_classes: int
    index: tuple[int, ...]


@dataclass(frozen=True)
class DataSchema:
    """Ordered variable kinds of a data row."""

    variables: tuple[Variable, ...]
    continuous_index: np.ndarray = field(init=False, repr=False, compare=False)
    groups: tuple[CategoricalGroup, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        variables = tuple(self.variables)
        if not variables:
            raise ArgumentError("a schema needs at least one variable")
        object.__setattr__(self, "variables", variables)
        object.__setattr__(self, "continuous_index", np.array(
            [i for i, v in enumerate(variables) if v.kind == CONTINUOUS], dtype=np.int64))
        grouped: dict[int, list[int]] = {}
        for i, v in enumerate(variables):
            if v.kind == CATEGORICAL:
                grouped.setdefault(v.n_classes, []).append(i)
        object.__setattr__(self, "groups", tuple(CategoricalGroup(k, tuple(ix)) for k, ix in grouped.items()))

    @classmethod
    def continuous(cls, count: int, prefix: str = "x") -> "DataSchema":
        return cls(tuple(Variable(f"{prefix}{i}", CONTINUOUS) for i in range(count)))

    @classmethod
    def categorical(cls, count: int, n_classes: int, prefix: str = "v") -> "DataSchema":
        return cls(tuple(Variable(f"{prefix}{i}", CATEGORICAL, n_classes) for i in range(count)))

    @property
    def d_total(self) -> int:
        return len(self.variables)

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def has_continuous(self) -> bool:
        return self.continuous_index.size > 0

    @property
    def has_categorical(self) -> bool:
        return bool(self.groups)

    @property
    def layout_width(self) -> int:
        """Width of the network input/output block for this schema."""
        return int(self.continuous_index.size) + sum(len(g.index) * g.n_classes for g in self.groups)

    def validate_rows(self, rows) -> np.ndarray:
        """Returns rows as a 2-D float array, raising ShapeError on schema mismatch."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.ndim != 2 or rows.shape[1] != self.d_total:
            raise ShapeError(f"rows of width {rows.shape[-1]} do not match a schema of {self.d_total} variables")
        for group in self.groups:
            block = rows[:, group.index]
            if np.any(block != np.round(block)) or np.any(block < 0) or np.any(block >= group.n_classes):
                raise ShapeError(f"categorical entries must be class indices in [0, {group.n_classes})")
        if self.has_continuous and not np.all(np.isfinite(rows[:, self.continuous_index])):
            raise ShapeError("continuous entries must be finite")
        return rows

    def to_dict(self) -> dict:
        return {"variables": [{"name": v.name, "kind": v.kind, "n_classes": v.n_classes} for v in self.variables]}

    @classmethod
    def from_dict(cls, data: dict) -> "DataSchema":
        return cls(tuple(Variable(v["name"], v["kind"], int(v.get("n_classes", 0))) for v in data["variables"]))


@dataclass(frozen=True)
class LossReport:
    """Loss of one row, or the mean over a batch, in nats and bits per dimension."""

    total_nats: float
    per_step: tuple[float, ...]
    bits_per_dim: float
    by_kind: dict = field(default_factory=dict)

    @classmethod
    def from_nats(cls, total: float, per_step, d_total: int, by_kind: dict | None = None) -> "LossReport":
        return cls(float(total), tuple(float(v) for v in per_step), float(total) / (d_total * LN2),
                   dict(by_kind or {}))


class RowStreams:
    """One random generator per row.

    Draws requested with a leading axis of ``len(generators) * repeats`` are
    produced stream by stream and stacked, so each row's randomness is fixed by
    its own seed regardless of what else is in the batch.
    """

    def __init__(self, generators, repeats: int = 1):
        self.generators = list(generators)
        self.repeats = int(repeats)

    @classmethod
    def from_seeds(cls, seeds) -> "RowStreams":
        return cls([np.random.default_rng(s) for s in seeds])

    def __len__(self) -> int:
        return len(self.generators)

    def repeat(self, n: int) -> "RowStreams":
        return RowStreams(self.generators, self.repeats * n)

    def _draw(self, method: str, size):
        size = tuple(size) if isinstance(size, (tuple, list)) else (size,)
        if size[0] != len(self.generators) * self.repeats:
            raise ShapeError(f"draw of {size[0]} rows from {len(self.generators)} streams x {self.repeats}")
        per_stream = (self.repeats,) + size[1:]
        return np.concatenate([getattr(g, method)(per_stream) for g in self.generators], axis=0)

    def standard_normal(self, size):
        return self._draw("standard_normal", size)

    def random(self, size):
        return self._draw("random", size)


def _as_rng(rng):
    if isinstance(rng, (list, tuple)):
        return RowStreams(rng)
    return rng


def _repeat_rng(rng, n: int):
    return rng.repeat(n) if isinstance(rng, RowStreams) else rng


@dataclass(frozen=True)
class BeliefState:
    """Input-distribution parameters for a batch of rows."""

    gaussian: GaussianParams | None
    categorical: tuple[CategoricalParams, ...] = ()

    @property
    def rows(self) -> int:
        if self.gaussian is not None:
            return self.gaussian.mean.shape[0]
        return self.categorical[0].probs.shape[0]


@dataclass(frozen=True)
class Prediction:
    """Output distribution: x_hat (R, n_continuous) and per-group log-probabilities (R, m, K)."""

    x_hat: np.ndarray | None
    log_probs: tuple[np.ndarray, ...] = ()

    @property
    def probs(self) -> tuple[np.ndarray, ...]:
        return tuple(np.exp(lp) for lp in self.log_probs)


@dataclass(frozen=True)
class SenderDraw:
    """Sender samples for one batch: continuous block and one block per categorical group."""

    continuous: NoisySample | None
    categorical: tuple[NoisySample, ...] = ()


def prior_state(schema: DataSchema, rows: int, prior_precision: float = 1.0) -> BeliefState:
    gaussian = None
    if schema.has_continuous:
        gaussian = GaussianParams.standard_prior((rows, schema.continuous_index.size), prior_precision)
    categorical = tuple(CategoricalParams.uniform((rows, len(g.index)), g.n_classes) for g in schema.groups)
    return BeliefState(gaussian, categorical)


def flow_state(rows: np.ndarray, schema: DataSchema, schedule: FlowSchedule, t, rng,
               prior_precision: float = 1.0) -> BeliefState:
    """Draws input parameters from the Bayesian flow distribution for every row."""
    n = rows.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    prior = prior_state(schema, n, prior_precision)
    gaussian = None
    if schema.has_continuous:
        gaussian = gaussian_flow(prior.gaussian, rows[:, schema.continuous_index],
                                 schedule.require(CONTINUOUS), t, rng)
    categorical = tuple(
        categorical_flow(prior.categorical[g], rows[:, group.index].astype(np.int64),
                         schedule.require(CATEGORICAL), t, rng)
        for g, group in enumerate(schema.groups))
    return BeliefState(gaussian, categorical)


class FlowNetwork:
    """The network Psi(xi, t) bound to a data schema.

    Continuous beliefs enter as mu / max(gamma(t), 1e-3) with
    gamma = beta / (rho0 + beta); categorical beliefs enter as 2 theta - 1.
    Outputs are x_hat (tanh-squashed) followed by one K-block of scores per
    categorical variable.
    """

    def __init__(self, spec: NetworkSpec, params: ParameterVector, schema: DataSchema,
                 schedule: FlowSchedule, prior_precision: float = 1.0):
        if spec.input_width != schema.layout_width or spec.output_width != schema.layout_width:
            raise ShapeError(f"network widths ({spec.input_width}, {spec.output_width}) "
                             f"do not match the schema layout width {schema.layout_width}")
        if spec.squashed_outputs != schema.continuous_index.size:
            raise ShapeError("squashed outputs must equal the number of continuous variables")
        if params.layout != spec.layout():
            raise ShapeError("parameter layout does not match the network spec")
        self.spec = spec
        self.params = params
        self.schema = schema
        self.schedule = FlowSchedule.of(schedule)
        self.prior_precision = float(prior_precision)

    @classmethod
    def create(cls, schema: DataSchema, schedule, hidden_widths=(256, 256), activation: str = "silu",
               time_embedding: str = "sinusoidal", frequencies: int = 8, rng=None, zero: bool = False,
               prior_precision: float = 1.0) -> "FlowNetwork":
        width = schema.layout_width
        spec = NetworkSpec(width, tuple(hidden_widths), width, activation, time_embedding, frequencies,
                           squashed_outputs=int(schema.continuous_index.size))
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(spec, init_parameters(spec, rng, zero=zero), schema, schedule, prior_precision)

    def with_params(self, params: ParameterVector) -> "FlowNetwork":
        return FlowNetwork(self.spec, params, self.schema, self.schedule, self.prior_precision)

    def copy(self) -> "FlowNetwork":
        return self.with_params(self.params.copy())

    def network_input(self, state: BeliefState, t: np.ndarray) -> np.ndarray:
        blocks = []
        if state.gaussian is not None:
            b = beta(self.schedule.require(CONTINUOUS), t)
            gamma = np.maximum(b / (self.prior_precision + b), RESCALE_FLOOR)
            blocks.append(state.gaussian.mean / gamma[:, None])
        for params in state.categorical:
            blocks.append((2.0 * params.probs - 1.0).reshape(params.probs.shape[0], -1))
        return np.concatenate(blocks, axis=1)

    def _split_output(self, out: np.ndarray) -> Prediction:
        n_cont = self.schema.continuous_index.size
        x_hat = out[:, :n_cont] if n_cont else None
        offset, log_probs = n_cont, []
        for group in self.schema.groups:
            size = len(group.index) * group.n_classes
            scores = out[:, offset:offset + size].reshape(out.shape[0], len(group.index), group.n_classes)
            log_probs.append(log_normalize(scores))
            offset += size
        return Prediction(x_hat, tuple(log_probs))

    def predict_with_cache(self, state: BeliefState, t):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (state.rows,))
        out, cache = forward_cached(self.spec, self.params, self.network_input(state, t), t)
        return self._split_output(np.atleast_2d(out)), cache

    def predict(self, state: BeliefState, t) -> Prediction:
        return self.predict_with_cache(state, t)[0]

    def parameter_gradient(self, cache, d_x_hat: np.ndarray | None, d_logits) -> ParameterVector:
        """Gradient of a loss given its derivatives w.r.t. x_hat and the categorical scores."""
        blocks = []
        if d_x_hat is not None:
            blocks.append(d_x_hat)
        for d in d_logits:
            blocks.append(d.reshape(d.shape[0], -1))
        return backward_cached(self.spec, self.params, cache, np.concatenate(blocks, axis=1))

    def to_manifest(self) -> dict:
        return {
            "network": self.spec.to_dict(),
            "schema": self.schema.to_dict(),
            "schedule": self.schedule.to_dict(),
            "prior_precision": self.prior_precision,
        }

    @classmethod
    def from_manifest(cls, manifest: dict, params: ParameterVector) -> "FlowNetwork":
        return cls(NetworkSpec.from_dict(manifest["network"]), params, DataSchema.from_dict(manifest["schema"]),
                   FlowSchedule.from_dict(manifest["schedule"]), manifest.get("prior_precision", 1.0))


def _prior_precision(net) -> float:
    return float(getattr(net, "prior_precision", 1.0))


def _onehot(indices: np.ndarray, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[indices.astype(np.int64)]


def sender_sample(x, alpha, schema: DataSchema, rng) -> SenderDraw:
    """Noisy observation of data rows at accuracy alpha.

    Continuous: y ~ N(x, 1/alpha). Categorical with class k:
    y ~ N(alpha (K onehot(k) - 1), alpha K I).
    """
    rows = schema.validate_rows(x)
    rng = _as_rng(rng)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=np.float64), (rows.shape[0],))
    continuous = None
    if schema.has_continuous:
        values = rows[:, schema.continuous_index]
        noise = rng.standard_normal(values.shape)
        continuous = NoisySample(values + noise / np.sqrt(expand_to(alpha, 2)), alpha)
    categorical = []
    for group in schema.groups:
        k = group.n_classes
        a = expand_to(alpha, 3)
        mean = a * (k * _onehot(rows[:, group.index], k) - 1.0)
        noise = rng.standard_normal(mean.shape)
        categorical.append(NoisySample(mean + np.sqrt(a * k) * noise, alpha))
    return SenderDraw(continuous, tuple(categorical))


def output_distribution(params_in: BeliefState, t, net) -> Prediction:
    """Network output distribution: x_hat in [-1, 1] and a simplex per categorical variable."""
    return net.predict(params_in, t)


def categorical_kl(classes: np.ndarray, log_probs: np.ndarray, alpha: np.ndarray, rng,
                   mc_samples: int) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo KL(sender || receiver) for categorical blocks, summed over variables.

    The receiver is the mixture sum_k p_k N(alpha (K e_k - 1), alpha K I). With
    z = y + alpha the log-density ratio reduces to z_x - logsumexp_k(log p_k + z_k).
    For mc_samples >= 2 the sender noise is drawn in antithetic pairs.

    Args:
        classes: (R, m) true class indices.
        log_probs: (R, m, K) output log-probabilities.
        alpha: (R,) accuracies.
        rng: Generator or RowStreams over R rows.
        mc_samples: Number of sender draws per row.

    Returns:
        (kl, d_logits): per-row estimates (R,) and their gradient with respect
        to the unnormalised scores behind ``log_probs``, (R, m, K).
    """
    rows, m, k = log_probs.shape
    onehot = _onehot(classes, k)[:, None]
    a = alpha.reshape(rows, 1, 1, 1)
    half = (mc_samples + 1) // 2
    eps = rng.standard_normal((rows, half, m, k))
    if mc_samples > 1:
        eps = np.concatenate([eps, -eps], axis=1)[:, :mc_samples]
    z = a * k * onehot + np.sqrt(a * k) * eps
    z_true = np.sum(z * onehot, axis=-1)
    scores = log_probs[:, None] + z
    top = np.max(scores, axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.sum(np.exp(scores - top), axis=-1))
    kl = np.mean(np.sum(z_true - lse, axis=-1), axis=1)
    responsibilities = np.mean(np.exp(scores - lse[..., None]), axis=1)
    d_logits = np.exp(log_probs) - responsibilities
    return kl, d_logits


@dataclass
class _Terms:
    continuous: np.ndarray
    categorical: np.ndarray
    d_x_hat: np.ndarray | None
    d_logits: list
    cache: object


def _discrete_terms(rows: np.ndarray, net, schedule: FlowSchedule, rng, mc_samples: int,
                    need_grad: bool) -> _Terms:
    schema = net.schema
    batch, n = rows.shape[0], schedule.n_steps
    step = np.tile(np.arange(n), batch)
    t_prev = step / n
    rep = np.repeat(rows, n, axis=0)
    step_rng = _repeat_rng(rng, n)
    state = flow_state(rep, schema, schedule, t_prev, step_rng, _prior_precision(net))
    if need_grad:
        pred, cache = net.predict_with_cache(state, t_prev)
    else:
        pred, cache = net.predict(state, t_prev), None
    kl_cont = np.zeros(rep.shape[0])
    kl_cat = np.zeros(rep.shape[0])
    d_x_hat, d_logits = None, []
    if schema.has_continuous:
        alphas = step_alphas(schedule.require(CONTINUOUS))[step]
        diff = rep[:, schema.continuous_index] - pred.x_hat
        kl_cont = 0.5 * alphas * np.sum(diff * diff, axis=1)
        d_x_hat = -alphas[:, None] * diff
    if schema.has_categorical:
        alphas = step_alphas(schedule.require(CATEGORICAL))[step]
        for g, group in enumerate(schema.groups):
            kl, d = categorical_kl(rep[:, group.index], pred.log_probs[g], alphas, step_rng, mc_samples)
            kl_cat += kl
            d_logits.append(d)
    return _Terms(kl_cont.reshape(batch, n), kl_cat.reshape(batch, n), d_x_hat, d_logits, cache)


def _continuous_time_terms(rows: np.ndarray, net, schedule: FlowSchedule, rng, t_samples: int,
                           need_grad: bool) -> _Terms:
    schema = net.schema
    if schema.has_categorical:
        raise UnsupportedSchemaError("the continuous-time loss is defined for continuous variables only")
    cont = schedule.require(CONTINUOUS)
    batch = rows.shape[0]
    rep = np.repeat(rows, t_samples, axis=0)
    sample_rng = _repeat_rng(rng, t_samples)
    strata = np.tile(np.arange(t_samples), batch)
    t = np.minimum((strata + sample_rng.random((rep.shape[0],))) / t_samples, 1.0)
    state = flow_state(rep, schema, schedule, t, sample_rng, _prior_precision(net))
    if need_grad:
        pred, cache = net.predict_with_cache(state, t)
    else:
        pred, cache = net.predict(state, t), None
    weight = -math.log(cont.sigma1) * np.power(cont.sigma1, -2.0 * t)
    diff = rep[:, schema.continuous_index] - pred.x_hat
    terms = weight * np.sum(diff * diff, axis=1)
    d_x_hat = -2.0 * weight[:, None] * diff / t_samples
    return _Terms(terms.reshape(batch, t_samples), np.zeros((batch, t_samples)), d_x_hat, [], cache)


def _check_mc(value: int, name: str):
    if int(value) != value or value < 1:
        raise ArgumentError(f"{name} must be a positive integer, got {value}")


def discrete_time_loss(x, net, schedule, rng, mc_samples: int = 16) -> LossReport:
    """Monte-Carlo estimate of the n-step loss L^n for a row (or the mean over rows).

    Each row's categorical per-step estimate is clamped at zero after averaging
    its ``mc_samples`` draws.
    """
    _check_mc(mc_samples, "mc_samples")
    schedule = FlowSchedule.of(schedule)
    rows = net.schema.validate_rows(x)
    terms = _discrete_terms(rows, net, schedule, _as_rng(rng), mc_samples, need_grad=False)
    categorical = np.maximum(terms.categorical, 0.0)
    per_step = (terms.continuous + categorical).mean(axis=0)
    by_kind = {CONTINUOUS: float(terms.continuous.sum(axis=1).mean()),
               CATEGORICAL: float(categorical.sum(axis=1).mean())}
    return LossReport.from_nats(float(np.sum(per_step)), per_step, net.schema.d_total, by_kind)


def continuous_time_loss(x, net, schedule, rng, t_samples: int = 1) -> LossReport:
    """Monte-Carlo estimate of L^inf = -ln(sigma1) E_t[sigma1^(-2t) |x - x_hat|^2]."""
    _check_mc(t_samples, "t_samples")
    schedule = FlowSchedule.of(schedule)
    rows = net.schema.validate_rows(x)
    terms = _continuous_time_terms(rows, net, schedule, _as_rng(rng), t_samples, need_grad=False)
    total = float(terms.continuous.mean(axis=1).mean())
    return LossReport.from_nats(total, (), net.schema.d_total, {CONTINUOUS: total, CATEGORICAL: 0.0})


def reconstruction_nats(rows: np.ndarray, net, schedule, rng) -> np.ndarray:
    """Per-row reconstruction loss -ln p_O(x | xi(1)) in nats."""
    schedule = FlowSchedule.of(schedule)
    schema = net.schema
    rows = schema.validate_rows(rows)
    state = flow_state(rows, schema, schedule, 1.0, _as_rng(rng), _prior_precision(net))
    pred = net.predict(state, np.ones(rows.shape[0]))
    nats = np.zeros(rows.shape[0])
    if schema.has_continuous:
        sigma1 = schedule.require(CONTINUOUS).sigma1
        diff = rows[:, schema.continuous_index] - pred.x_hat
        nats += np.sum(0.5 * math.log(2.0 * math.pi * sigma1 ** 2) + diff * diff / (2.0 * sigma1 ** 2), axis=1)
    for g, group in enumerate(schema.groups):
        probs = np.exp(pred.log_probs[g])
        chosen = np.take_along_axis(probs, rows[:, group.index].astype(np.int64)[..., None], axis=-1)[..., 0]
        nats += np.sum(-np.log(np.maximum(chosen, PROB_FLOOR)), axis=1)
    return nats


def reconstruction_loss(x, net, schedule, rng) -> float:
    """Reconstruction loss of one row (or the mean over rows), in nats."""
    return float(np.mean(reconstruction_nats(x, net, schedule, rng)))


def _sample_classes(probs: np.ndarray, rng) -> np.ndarray:
    u = rng.random(probs.shape[:-1])
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum(np.sum(cdf < u[..., None], axis=-1), probs.shape[-1] - 1)


def sample_rows(net, schedule, schema: DataSchema, rng, count: int, n_steps: int | None = None,
                categorical_mode: str = "argmax") -> np.ndarray:
    """Generates ``count`` rows by n-step ancestral sampling.

    Args:
        net: Network exposing ``predict(state, t)``.
        schedule: Schedule(s) driving the per-step accuracies.
        schema: Row schema.
        rng: Generator (or RowStreams over ``count`` rows).
        count: Number of rows.
        n_steps: Sampling steps; defaults to the schedule's own.
        categorical_mode: "argmax" or "sample" for the final categorical read-out.

    Returns:
        (count, D) array in schema order.
    """
    if categorical_mode not in ("argmax", "sample"):
        raise ArgumentError(f"Unknown categorical mode: {categorical_mode}")
    if count == 0:
        return np.zeros((0, schema.d_total))
    schedule = FlowSchedule.of(schedule)
    if n_steps is not None:
        if n_steps < 1:
            raise ArgumentError("n_steps must be at least 1")
        schedule = schedule.with_steps(n_steps)
    rng = _as_rng(rng)
    n = schedule.n_steps
    logger.debug(f"Sampling {count} rows over {n} steps")
    state = prior_state(schema, count, _prior_precision(net))
    cont_alphas = step_alphas(schedule.require(CONTINUOUS)) if schema.has_continuous else None
    cat_alphas = step_alphas(schedule.require(CATEGORICAL)) if schema.has_categorical else None
    for i in range(1, n + 1):
        pred = net.predict(state, np.full(count, (i - 1) / n))
        gaussian = state.gaussian
        if gaussian is not None:
            alpha = cont_alphas[i - 1]
            y = pred.x_hat + rng.standard_normal(pred.x_hat.shape) / math.sqrt(alpha)
            gaussian = gaussian_update(gaussian, NoisySample(y, alpha))
        categorical = []
        for g, group in enumerate(schema.groups):
            alpha, k = cat_alphas[i - 1], group.n_classes
            classes = _sample_classes(np.exp(pred.log_probs[g]), rng)
            mean = alpha * (k * _onehot(classes, k) - 1.0)
            y = mean + math.sqrt(alpha * k) * rng.standard_normal(mean.shape)
            categorical.append(categorical_update(state.categorical[g], NoisySample(y, alpha)))
        state = BeliefState(gaussian, tuple(categorical))
    final = net.predict(state, np.ones(count))
    out = np.zeros((count, schema.d_total))
    if schema.has_continuous:
        out[:, schema.continuous_index] = final.x_hat
    for g, group in enumerate(schema.groups):
        probs = np.exp(final.log_probs[g])
        if categorical_mode == "argmax":
            out[:, group.index] = np.argmax(probs, axis=-1)
        else:
            out[:, group.index] = _sample_classes(probs, rng)
    return out


def sample(net, schedule, schema: DataSchema, rng, n_steps: int | None = None,
           categorical_mode: str = "argmax") -> np.ndarray:
    """Generates a single data row."""
    return sample_rows(net, schedule, schema, rng, 1, n_steps, categorical_mode)[0]


def batch_loss(rows, net: FlowNetwork, schedule, rng, loss_kind: str = "discrete", mc_samples: int = 1,
               t_samples: int = 1) -> tuple[LossReport, ParameterVector]:
    """Mean training loss over a batch and its exact gradient with respect to the network parameters.

    Flow draws are constants: gradients flow through the network outputs only.

    Args:
        rows: (B, D) batch in schema order.
        net: The network being trained.
        schedule: Training schedule(s).
        rng: Generator or per-row generators.
        loss_kind: "discrete" (n-step loss) or "continuous" (continuous-time loss).
        mc_samples: Sender draws per categorical KL term.
        t_samples: Time draws per row for the continuous-time loss.
    """
    if not isinstance(net, FlowNetwork):
        raise ArgumentError("batch_loss needs a FlowNetwork")
    rows = net.schema.validate_rows(rows)
    if rows.shape[0] == 0:
        raise ArgumentError("batch_loss needs a non-empty batch")
    schedule = FlowSchedule.of(schedule)
    rng = _as_rng(rng)
    batch = rows.shape[0]
    if loss_kind == "discrete":
        _check_mc(mc_samples, "mc_samples")
        terms = _discrete_terms(rows, net, schedule, rng, mc_samples, need_grad=True)
        per_step = (terms.continuous + terms.categorical).mean(axis=0)
        total = float(np.sum(per_step))
    elif loss_kind == "continuous":
        _check_mc(t_samples, "t_samples")
        terms = _continuous_time_terms(rows, net, schedule, rng, t_samples, need_grad=True)
        per_step = ()
        total = float(terms.continuous.mean(axis=1).mean())
    else:
        raise ArgumentError(f"Unknown loss kind: {loss_kind}")
    d_x_hat = terms.d_x_hat / batch if terms.d_x_hat is not None else None
    gradient = net.parameter_gradient(terms.cache, d_x_hat, [d / batch for d in terms.d_logits])
    by_kind = {CONTINUOUS: float(terms.continuous.sum(axis=1).mean()) if loss_kind == "discrete" else total,
               CATEGORICAL: float(terms.categorical.sum(axis=1).mean())}
    return LossReport.from_nats(total, per_step, net.schema.d_total, by_kind), gradient
