"""Exception hierarchy shared by every module."""


class CondRegError(Exception):
    """Base class for all library errors."""


class ShapeError(CondRegError, ValueError):
    """Array dimensions are incompatible."""


class ParameterError(CondRegError, ValueError):
    """A scalar parameter is outside its admissible range."""


class NumericError(CondRegError, ArithmeticError):
    """A computation produced a non-finite value."""


class InsufficientSampleError(CondRegError, ValueError):
    """Too few rows to form the requested estimator."""


class SingleClassBatchError(CondRegError, ValueError):
    """A batch contains only one value of the sensitive attribute."""


class UndefinedCorrelationError(CondRegError, ValueError):
    """Pearson correlation requested for a constant series."""


class DegenerateCovarianceError(CondRegError, ValueError):
    """Empirical covariance is identically zero."""


class DataBalanceError(CondRegError, RuntimeError):
    """Too many batches had to be skipped during training."""


class ParseError(CondRegError, ValueError):
    """A data file does not follow the expected format."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(CondRegError, ValueError):
    """An experiment configuration failed validation."""


class ConvergenceWarning(UserWarning):
    """Sinkhorn iterations stopped at ``max_iter`` above tolerance."""
