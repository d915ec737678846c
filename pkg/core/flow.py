"""Bayesian updates and closed-form Bayesian flow draws.

All functions work on arrays with arbitrary leading batch axes: Gaussian
parameters are (..., D), categorical parameters are (..., D, K). Accuracies and
times may be scalars or arrays over the leading batch axes.
"""
import logging
from dataclasses import dataclass

import numpy as np

from core.errors import ArgumentError, NumericError, ShapeError
from core.schedule import AccuracySchedule, beta

logger = logging.getLogger('flow')

PROB_FLOOR = 1e-30
SIMPLEX_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GaussianParams:
    """Per-dimension Gaussian belief (mean mu, precision rho)."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        precision = np.asarray(self.precision, dtype=np.float64)
        if mean.ndim < 1 or mean.shape[-1] < 1:
            raise ShapeError("GaussianParams needs at least one dimension")
        if mean.shape != precision.shape:
            raise ShapeError(f"mean shape {mean.shape} != precision shape {precision.shape}")
        if not np.all(precision > 0.0):
            raise NumericError("precision must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", precision)

    @classmethod
    def standard_prior(cls, shape, precision: float = 1.0) -> "GaussianParams":
        return cls(mean=np.zeros(shape), precision=np.full(shape, float(precision)))


@dataclass(frozen=True)
class CategoricalParams:
    """Per-variable probability simplex over K values, shape (..., D, K)."""

    probs: np.ndarray

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim < 2:
            raise ShapeError("CategoricalParams needs a (D, K) array")
        if probs.shape[-1] < 2:
            raise ShapeError(f"K must be at least 2, got {probs.shape[-1]}")
        if np.any(probs < 0.0) or np.any(probs > 1.0):
            raise NumericError("probabilities must lie in [0, 1]")
        if not np.allclose(probs.sum(axis=-1), 1.0, rtol=0.0, atol=SIMPLEX_TOLERANCE):
            raise NumericError("each row must sum to 1")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, shape, n_classes: int) -> "CategoricalParams":
        return cls(probs=np.full(tuple(shape) + (n_classes,), 1.0 / n_classes))


@dataclass(frozen=True)
class NoisySample:
    """A sender observation y with its accuracy alpha."""

    values: np.ndarray
    accuracy: float | np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        accuracy = np.asarray(self.accuracy, dtype=np.float64)
        if not np.all(accuracy > 0.0):
            raise ArgumentError("accuracy must be strictly positive")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "accuracy", float(accuracy) if accuracy.ndim == 0 else accuracy)


def expand_to(a, ndim: int) -> np.ndarray:
    """Appends trailing singleton axes so a batch-shaped array broadcasts against ndim-d data."""
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def log_normalize(logits: np.ndarray) -> np.ndarray:
    """Log-softmax over the last axis; -inf entries stay at probability zero."""
    top = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - top
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def safe_log(probs: np.ndarray) -> np.ndarray:
    """log(p) with positive entries floored at PROB_FLOOR and exact zeros mapped to -inf."""
    with np.errstate(divide="ignore"):
        return np.where(probs > 0.0, np.log(np.maximum(probs, PROB_FLOOR)), -np.inf)


def gaussian_update(prior: GaussianParams, y: NoisySample) -> GaussianParams:
    """Conjugate update: rho' = rho + alpha, mu' = (rho mu + alpha y) / rho'."""
    if y.values.shape != prior.mean.shape:
        raise ShapeError(f"observation shape {y.values.shape} != belief shape {prior.mean.shape}")
    alpha = expand_to(y.accuracy, prior.mean.ndim)
    precision = prior.precision + alpha
    mean = (prior.precision * prior.mean + alpha * y.values) / precision
    return GaussianParams(mean=mean, precision=precision)


def categorical_update(prior: CategoricalParams, y: NoisySample) -> CategoricalParams:
    """Multiplicative update probs' proportional to probs * exp(y), renormalised in log space."""
    if y.values.shape != prior.probs.shape:
        raise ShapeError(f"observation shape {y.values.shape} != belief shape {prior.probs.shape}")
    if not np.all(np.isfinite(y.values)):
        raise NumericError("categorical observation contains non-finite values")
    return CategoricalParams(probs=np.exp(log_normalize(safe_log(prior.probs) + y.values)))


def gaussian_flow(prior: GaussianParams, x, schedule: AccuracySchedule, t, rng) -> GaussianParams:
    """One draw from the Bayesian flow distribution of a Gaussian belief at time t.

    Args:
        prior: Belief at t = 0.
        x: Data, same shape as ``prior.mean``.
        schedule: Continuous accuracy schedule.
        t: Time, scalar or one value per leading batch entry.
        rng: Anything with ``standard_normal(size)``.

    Returns:
        GaussianParams with precision rho0 + beta(t) and a sampled mean.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != prior.mean.shape:
        raise ShapeError(f"data shape {x.shape} != belief shape {prior.mean.shape}")
    b = expand_to(beta(schedule, t), x.ndim)
    precision = prior.precision + b
    # mu0 + beta (x - mu0) / rho keeps t = 0 bit-exact.
    mean = prior.mean + b * (x - prior.mean) / precision
    std = np.sqrt(b) / precision
    noise = rng.standard_normal(x.shape)
    return GaussianParams(mean=mean + std * noise, precision=precision)


def categorical_flow(prior: CategoricalParams, x, schedule: AccuracySchedule, t, rng) -> CategoricalParams:
    """One draw from the Bayesian flow distribution of a categorical belief at time t.

    Draws y ~ N(beta (K onehot(x) - 1), beta K I) per variable and returns
    normalize(prior * exp(y)).
    """
    x = np.asarray(x)
    n_classes = prior.probs.shape[-1]
    if x.shape != prior.probs.shape[:-1]:
        raise ShapeError(f"class index shape {x.shape} != belief shape {prior.probs.shape[:-1]}")
    idx = x.astype(np.int64)
    if np.any(idx != x) or np.any(idx < 0) or np.any(idx >= n_classes):
        raise ShapeError(f"class indices must be integers in [0, {n_classes})")
    b = expand_to(beta(schedule, t), prior.probs.ndim)
    onehot = np.eye(n_classes)[idx]
    noise = rng.standard_normal(prior.probs.shape)
    y = b * (n_classes * onehot - 1.0) + np.sqrt(b * n_classes) * noise
    return CategoricalParams(probs=np.exp(log_normalize(safe_log(prior.probs) + y)))
