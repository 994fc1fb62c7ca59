"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class DomainError(ValueError):
    """Input lies outside an operation's mathematical domain."""


class ContractError(ValueError):
    """A caller violated an interface contract (non-scalar loss, horizon mismatch, ...)."""


class ConfigError(ValueError):
    """An invalid configuration value."""


class TrainingError(RuntimeError):
    """Training diverged or produced non-finite values.

    Carries ``trace`` (the training trace so far) and ``component`` /
    ``parameter`` attribution when available.
    """

    def __init__(self, msg, trace=None, component=None, parameter=None):
        super().__init__(msg)
        self.trace = trace
        self.component = component
        self.parameter = parameter


class EstimatorError(RuntimeError):
    """An estimation-stage solver failed to converge."""


class DatasetFormatError(ValueError):
    """A dataset file failed to parse; message names line and field."""
