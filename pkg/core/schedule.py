import logging
from dataclasses import dataclass, replace

import numpy as np

from core.errors import ArgumentError, DomainError, UnsupportedSchemaError

logger = logging.getLogger('schedule')

CONTINUOUS = "continuous"
CATEGORICAL = "categorical"


@dataclass(frozen=True)
class AccuracySchedule:
    """Accuracy schedule beta(t) for one kind of variable.

    Continuous variables use beta(t) = sigma1^(-2t) - 1, categorical variables
    use beta(t) = beta1 * t^2. ``n_steps`` is the number of transmission steps
    used when the schedule is discretised.
    """

    kind: str
    sigma1: float | None = None
    beta1: float | None = None
    n_steps: int = 20

    def __post_init__(self):
        if self.kind == CONTINUOUS:
            if self.sigma1 is None or not 0.0 < self.sigma1 < 1.0:
                raise ArgumentError(f"continuous schedule needs 0 < sigma1 < 1, got {self.sigma1}")
        elif self.kind == CATEGORICAL:
            if self.beta1 is None or not self.beta1 > 0.0:
                raise ArgumentError(f"categorical schedule needs beta1 > 0, got {self.beta1}")
        else:
            raise ArgumentError(f"Unknown schedule kind: {self.kind}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ArgumentError(f"n_steps must be a positive integer, got {self.n_steps}")

    @classmethod
    def continuous(cls, sigma1: float = 0.02, n_steps: int = 20) -> "AccuracySchedule":
        return cls(kind=CONTINUOUS, sigma1=float(sigma1), n_steps=int(n_steps))

    @classmethod
    def categorical(cls, beta1: float = 4.0, n_steps: int = 20) -> "AccuracySchedule":
        return cls(kind=CATEGORICAL, beta1=float(beta1), n_steps=int(n_steps))

    def with_steps(self, n_steps: int) -> "AccuracySchedule":
        return replace(self, n_steps=int(n_steps))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "sigma1": self.sigma1, "beta1": self.beta1, "n_steps": self.n_steps}

    @classmethod
    def from_dict(cls, data: dict) -> "AccuracySchedule":
        return cls(kind=data["kind"], sigma1=data.get("sigma1"), beta1=data.get("beta1"),
                   n_steps=int(data.get("n_steps", 20)))


def _check_time(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"t must lie in [0, 1], got {t if t.ndim == 0 else (t.min(), t.max())}")
    return t


def _result(value, t):
    return float(value) if np.ndim(t) == 0 else value


def beta(schedule: AccuracySchedule, t):
    """Accumulated accuracy beta(t); scalar in, float out, arrays elementwise."""
    tt = _check_time(t)
    if schedule.kind == CONTINUOUS:
        value = np.power(schedule.sigma1, -2.0 * tt) - 1.0
    else:
        value = schedule.beta1 * tt * tt
    return _result(value, tt)


def alpha_rate(schedule: AccuracySchedule, t):
    """Accuracy rate alpha(t) = d beta / dt, non-negative."""
    tt = _check_time(t)
    if schedule.kind == CONTINUOUS:
        value = -2.0 * np.log(schedule.sigma1) * np.power(schedule.sigma1, -2.0 * tt)
    else:
        value = 2.0 * schedule.beta1 * tt
    return _result(value, tt)


def step_alphas(schedule: AccuracySchedule) -> np.ndarray:
    """Per-step accuracies alpha_i = beta(i/n) - beta((i-1)/n), i = 1..n."""
    n = schedule.n_steps
    betas = beta(schedule, np.arange(n + 1, dtype=np.float64) / n)
    betas[0] = 0.0
    return np.diff(betas)


@dataclass(frozen=True)
class FlowSchedule:
    """The pair of schedules a mixed schema needs, sharing one step count.

    Either member may be absent when the schema has no variables of that kind.
    """

    continuous: AccuracySchedule | None = None
    categorical: AccuracySchedule | None = None

    def __post_init__(self):
        if self.continuous is None and self.categorical is None:
            raise ArgumentError("FlowSchedule needs at least one schedule")
        if self.continuous is not None and self.continuous.kind != CONTINUOUS:
            raise ArgumentError("continuous slot holds a non-continuous schedule")
        if self.categorical is not None and self.categorical.kind != CATEGORICAL:
            raise ArgumentError("categorical slot holds a non-categorical schedule")
        if (self.continuous is not None and self.categorical is not None
                and self.continuous.n_steps != self.categorical.n_steps):
            raise ArgumentError("continuous and categorical schedules must share n_steps")

    @classmethod
    def of(cls, schedule) -> "FlowSchedule":
        """Wraps a bare AccuracySchedule; FlowSchedules pass through."""
        if isinstance(schedule, FlowSchedule):
            return schedule
        if isinstance(schedule, AccuracySchedule):
            if schedule.kind == CONTINUOUS:
                return cls(continuous=schedule)
            return cls(categorical=schedule)
        raise ArgumentError(f"Not a schedule: {schedule!r}")

    @property
    def n_steps(self) -> int:
        member = self.continuous if self.continuous is not None else self.categorical
        return member.n_steps

    def with_steps(self, n_steps: int) -> "FlowSchedule":
        return FlowSchedule(
            continuous=self.continuous.with_steps(n_steps) if self.continuous else None,
            categorical=self.categorical.with_steps(n_steps) if self.categorical else None,
        )

    def require(self, kind: str) -> AccuracySchedule:
        schedule = self.continuous if kind == CONTINUOUS else self.categorical
        if schedule is None:
            raise UnsupportedSchemaError(f"No {kind} schedule configured for a schema with {kind} variables")
        return schedule

    def to_dict(self) -> dict:
        return {
            "continuous": self.continuous.to_dict() if self.continuous else None,
            "categorical": self.categorical.to_dict() if self.categorical else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FlowSchedule":
        cont = data.get("continuous")
        cat = data.get("categorical")
        return cls(
            continuous=AccuracySchedule.from_dict(cont) if cont else None,
            categorical=AccuracySchedule.from_dict(cat) if cat else None,
        )
