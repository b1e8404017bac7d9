class ShapeError(ValueError):
    """Raised when tensor shapes or channel counts do not fit an operation."""


class ConfigError(ValueError):
    """Raised for out-of-range parameters and invalid configuration files."""


class DataError(ValueError):
    """Raised for invalid samples, e.g. labels outside [0, K) and not the ignore index."""


class BankStateError(RuntimeError):
    """Raised when the prototype bank is queried before any slot is initialized."""


class SnapshotError(ValueError):
    """Raised when a serialized prototype bank cannot be parsed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class NonFiniteLossError(FloatingPointError):
    """Raised by the training step when a loss component is NaN or infinite."""

    def __init__(self, iteration, components):
        details = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at iteration {iteration}: {details}")
        self.iteration = iteration
        self.components = components
