"""Exception hierarchy shared by every subpackage.

The CLI maps these onto exit codes, so keep the hierarchy flat.
"""


class SDBError(Exception):
    """Base class for all package errors."""


class ConfigError(SDBError, ValueError):
    """A configuration value violates its documented constraint."""


class ContractError(SDBError, ValueError):
    """A caller broke a precondition (shape, key alignment, paired flag...)."""


class DimensionError(ContractError):
    """Operand shapes do not conform for the named operation."""

    def __init__(self, op, message):
        self.op = op
        super().__init__(f"{op}: {message}")


class DomainError(SDBError, ValueError):
    """An argument falls outside the mathematical domain of a function."""


class NumericError(SDBError, FloatingPointError):
    """A computation produced NaN or Inf."""


class DivergenceError(NumericError):
    """A sampler or training loop produced non-finite values.

    ``step`` holds the sampler step or training iteration index where the
    divergence was detected.
    """

    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class CalibrationError(SDBError, RuntimeError):
    """The content classifier failed its sanity accuracy threshold."""
