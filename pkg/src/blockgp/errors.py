"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A computation produced non-finite or structurally invalid numbers
    (non-finite kernel entries, loss of positive definiteness, failed
    factorizations)."""


class ConvergenceError(NumericError):
    """An iterative solve failed to reach its requested tolerance."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class TrainingError(RuntimeError):
    """Hyperparameter optimization aborted; carries the partial trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
