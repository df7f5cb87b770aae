"""Exception types shared across the package.

Each maps onto one CLI exit code (see :mod:`zoomstack.cli`).
"""


class ZoomstackError(Exception):
    exit_code = 1


class ConfigError(ZoomstackError, ValueError):
    exit_code = 2


class ContractViolation(ZoomstackError, RuntimeError):
    exit_code = 3


class DimensionError(ContractViolation, ValueError):
    """Shapes that do not conform to an operation's contract."""


class DomainError(ContractViolation, ValueError):
    """Argument outside the operation's domain (timestep, scale, pixel range...)."""


class CapabilityError(ContractViolation):
    """Backward pass reached a primitive with no derivative rule."""


class IndexingError(ContractViolation, IndexError):
    pass


class DivergenceError(ZoomstackError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NumericalError(DivergenceError):
    """Singular systems, zero-norm vectors and similar arithmetic failures."""
