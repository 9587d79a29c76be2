"""Exception hierarchy shared by all modules.

Each error maps to one CLI exit code family: config problems exit 2,
data problems exit 3, training/runtime problems exit 4.
"""


class AffectError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AffectError):
    """Invalid, unknown, or out-of-range configuration value."""


class ValidationError(AffectError):
    """A domain-type invariant was violated; message names field and invariant."""


class DomainError(AffectError):
    """A scalar argument is outside its mathematical domain."""


class ParseError(AffectError):
    """Malformed annotation file; carries a 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(AffectError):
    """Tensor/array arguments have inconsistent or unexpected shapes."""


class DegenerateInputError(AffectError):
    """Inputs make the requested quantity undefined (e.g. vanishing denominator)."""


class IncompatibleCheckpointError(AffectError):
    """Checkpoint does not match the requested task or architecture."""


class TrainingError(AffectError):
    """A training run failed or was handed an unusable split."""
