"""Exception types shared across the package.

Callers distinguish data problems (bad files, degenerate inputs) from usage
problems (wrong shapes, invalid arguments) and from numerical failures; the
CLI maps DataError to exit code 2 and everything else to 1.
"""


class ShapeError(ValueError):
    """Tensor/array dimensions do not satisfy an operation's contract."""


class NumericsError(ArithmeticError):
    """A computation produced NaN/Inf or could not be evaluated."""


class UsageError(ValueError):
    """An API was called with arguments outside its contract."""


class DomainError(ValueError):
    """A value is outside its documented domain (e.g. score not in [0, 100])."""


class ScheduleError(UsageError):
    """Learning-rate schedule queried outside [0, T]."""


class DefectSpecError(UsageError):
    """A synthetic-defect specification is internally inconsistent."""


class DataError(ValueError):
    """A data file or dataset is malformed or insufficient."""


class InsufficientDataError(DataError):
    """Not enough subjects/images/pairs for the requested computation."""


class DegenerateRaterError(DataError):
    """A subject's scores have zero spread; normalization is undefined."""


class UndefinedCorrelationError(DataError):
    """Correlation of a constant vector is undefined."""


class MissingDataError(DataError):
    """An expected record (e.g. ratings for a triplet) is absent."""
