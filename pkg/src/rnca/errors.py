class ContractError(ValueError):
    """Raised when an operation is called with arguments violating its preconditions."""


class NumericInstabilityError(FloatingPointError):
    """Non-finite values appeared in the state or the gradients."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class MetricUndefinedError(ValueError):
    """Distance metrics are undefined for empty masks."""


class FormatError(ValueError):
    """Malformed checkpoint, image or config file."""
