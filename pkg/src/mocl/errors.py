"""Exception hierarchy shared by every layer of the package."""


class MoclError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(MoclError, ValueError):
    """Invalid configuration, dimension mismatch, or infeasible request."""


class UnsupportedKindError(ConfigurationError):
    """A PEFT kind that the requested operation does not support."""


class CompositionError(MoclError, ValueError):
    """Modules that cannot be combined (empty list, mixed kinds, bad weights)."""


class DegenerateInputError(MoclError, ValueError):
    """Zero-norm vector where a direction is required."""


class LabelIndexError(MoclError, IndexError):
    """Class index outside the logits range."""


class NonFiniteError(MoclError, ArithmeticError):
    """An operation produced NaN or Inf."""


class TrainingDivergenceError(NonFiniteError):
    """Loss became non-finite during training."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class ProtocolError(MoclError, RuntimeError):
    """Continual-learning protocol violation, e.g. out-of-order tasks."""


class UnknownTaskError(MoclError, LookupError):
    """Task id that the learner has not seen."""


class DataFormatError(MoclError, ValueError):
    """Malformed corpus file."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ArtifactMismatchError(MoclError):
    """Serialized artifacts that were produced under different configs."""
