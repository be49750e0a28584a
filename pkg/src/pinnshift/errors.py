"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
numeric failures with 3.
"""


class PinnShiftError(Exception):
    """Base class for all package errors."""


class ConfigError(PinnShiftError, ValueError):
    """Invalid configuration, parameters or arguments."""


class NumericError(PinnShiftError, ArithmeticError):
    """A computation produced non-finite values.

    ``epoch`` carries the training epoch when the failure happened during
    optimization, and ``record`` the partial run (last good state) if any.
    """

    def __init__(self, message, epoch=None, record=None):
        super().__init__(message)
        self.epoch = epoch
        self.record = record


class UnsupportedError(PinnShiftError, NotImplementedError):
    """Operation not available for the requested problem kind."""


class DegenerateInputError(PinnShiftError, ValueError):
    """Input is well-formed but degenerate (e.g. an all-zero spectrum)."""
