"""Exception types raised by the flowrecall core.

Core code raises these; only the command-line boundary catches them and turns
them into exit codes.
"""


class FlowRecallError(Exception):
    """Base class for every error raised by flowrecall."""


class DomainError(FlowRecallError, ValueError):
    """A time value or other scalar argument is outside its domain."""


class ShapeError(FlowRecallError, ValueError):
    """Array dimensions, parameter layouts or data schemas do not match."""


class NumericError(FlowRecallError, ArithmeticError):
    """Non-finite values were produced or supplied."""


class ArgumentError(FlowRecallError, ValueError):
    """An argument is invalid for reasons other than shape or domain."""


class FormatError(FlowRecallError, ValueError):
    """A file on disk is malformed (bad magic, truncated, wrong dimensions)."""


class UnsupportedSchemaError(FlowRecallError, ValueError):
    """The requested operation is not defined for the variables in the schema."""


class QualityError(FlowRecallError):
    """A fitted component is below the quality floor required to use it."""


class ConfigError(FlowRecallError, ValueError):
    """Experiment configuration is invalid.

    Args:
        message: What is wrong.
        path: The config file the problem was found in.
        line: 1-based line the offending key appears on, when known.
    """

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.message = message
        self.path = path
        self.line = line
        super().__init__(str(self))

    def __str__(self) -> str:
        if self.path and self.line:
            return f"{self.path}:{self.line}: {self.message}"
        if self.path:
            return f"{self.path}: {self.message}"
        return self.message


class ScenarioAborted(FlowRecallError):
    """A continual-learning scenario failed part-way.

    Args:
        message: Description of the failure.
        records: MetricsRecords collected for the tasks finished before the failure.
        task_index: Index of the task that failed.
    """

    def __init__(self, message: str, records: list, task_index: int):
        super().__init__(message)
        self.records = records
        self.task_index = task_index
