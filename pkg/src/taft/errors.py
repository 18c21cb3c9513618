"""Exception types raised across the package."""


class TaftError(Exception):
    """Base class for all package errors."""


class DimensionError(TaftError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(TaftError, FloatingPointError):
    """A forward operation produced NaN or Inf from finite inputs."""


class GraphError(TaftError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, reused root, ...)."""


class InversionError(TaftError, ArithmeticError):
    """Matrix is singular or too ill-conditioned to invert.

    ``condition`` carries the 1-norm condition estimate (``inf`` when a
    zero pivot was hit before the estimate could be formed).
    """

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


class DegenerateSupportError(TaftError, ValueError):
    """Soft-label weights sum to (almost) zero for a class."""


class DegeneratePrototypeError(TaftError, ValueError):
    """A prototype or reference vector has near-zero norm."""


class GenerationError(TaftError, RuntimeError):
    """The shape renderer exhausted its rejection budget."""


class EvaluationError(TaftError, ValueError):
    """An evaluation cannot be computed (empty run, zero union, ...)."""


class CheckpointError(TaftError, ValueError):
    """Checkpoint file is malformed or has an unsupported version."""


class ConfigError(TaftError, ValueError):
    """Configuration file is missing, malformed, or has unknown keys."""
