"""Exception types raised across the package."""


class AdaspecError(Exception):
    """Base class for all package errors."""


class CapacityError(AdaspecError):
    """A forward pass would exceed the model's context capacity."""


class ArgumentError(AdaspecError, ValueError):
    """An operation was called with structurally invalid arguments."""


class InvariantViolation(AdaspecError, ValueError):
    """A domain-type invariant does not hold (e.g. an unnormalized distribution)."""


class InvalidDraftError(AdaspecError):
    """A draft token is inconsistent with the distribution it claims to come from."""


class DegenerateResidualError(AdaspecError):
    """The residual distribution has zero mass (target equals draft pointwise)."""


class TrainingError(AdaspecError):
    """Training diverged or otherwise failed."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(AdaspecError, ValueError):
    """Invalid configuration value or inconsistent configuration."""


class MetricError(AdaspecError):
    """A metric is undefined for the given inputs (e.g. AUC on one class)."""


class CheckpointError(AdaspecError):
    """A checkpoint file is missing, corrupt, or has the wrong format version."""
