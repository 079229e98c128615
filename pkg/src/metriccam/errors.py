"""Exception types shared across the package.

The CLI maps these onto process exit codes, so library code should raise
the most specific class that applies.
"""


class MetricCamError(Exception):
    """Base class for all package errors."""


class DomainError(MetricCamError, ValueError):
    """An argument violates a documented precondition."""


class DegenerateInputError(MetricCamError, ValueError):
    """Input is structurally valid but degenerate (empty masks, singular
    systems, no usable samples)."""


class StateError(MetricCamError, RuntimeError):
    """Operation called on an object in the wrong state."""


class DivergenceError(MetricCamError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")


class FileFormatError(MetricCamError, ValueError):
    """A file exists but cannot be parsed in the expected format."""
