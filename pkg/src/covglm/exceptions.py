"""Exception types shared across the package."""


class CovglmError(Exception):
    """Base class for all package errors."""


class SpecificationError(CovglmError):
    """Invalid model specification, configuration, or data schema."""


class DataError(CovglmError):
    """Malformed input data; message carries row/column context."""


class InfeasibleParameterError(CovglmError):
    """Parameter point where a covariance block is not positive definite.

    Raised during assembly and caught by the fitting loop, where it acts
    as a step-halving signal rather than a hard failure.
    """


class ConvergenceError(CovglmError):
    """Fitting loop exhausted its iteration budget or lost a search direction."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
