class ContractViolation(ValueError):
    """Raised when an operation is called outside its preconditions."""


class ConfigurationError(RuntimeError):
    """Raised when a model or run is configured inconsistently."""


class TrainingAbort(RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message, step=None, terms=None):
        super().__init__(message)
        self.step = step
        self.terms = terms or {}
