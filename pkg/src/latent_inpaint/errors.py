"""Exception types shared across the package.

The CLI maps these onto process exit codes, so new error conditions
should reuse one of the classes below rather than raising bare
ValueError/RuntimeError from user-facing paths.
"""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericalError(FloatingPointError):
    """A loss or update produced NaN/Inf; the run must abort."""


class DataError(RuntimeError):
    """Unreadable, missing, or malformed input data."""


class CheckpointError(DataError):
    """Corrupt, truncated, or version-incompatible checkpoint file."""


class IsolatedHoleError(ValueError):
    """A hole component has no 4-connected path to any known pixel."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""
