"""Exception hierarchy shared by every module."""


class LaneTopoError(Exception):
    """Base class for all package errors."""


class ConfigError(LaneTopoError, ValueError):
    """Invalid configuration or incompatible hyperparameters."""


class ShapeError(LaneTopoError, ValueError):
    """Tensor dimensions do not agree."""


class DomainError(LaneTopoError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class DegenerateInputError(LaneTopoError, ValueError):
    """Geometry with zero length or too few distinct points."""


class MatchingError(LaneTopoError, ValueError):
    """Assignment problem that cannot be solved (e.g. NaN cost)."""


class DataError(LaneTopoError, ValueError):
    """Malformed or inconsistent input files."""


class TrainingError(LaneTopoError, RuntimeError):
    """Numeric failure during optimisation (NaN loss or gradient)."""
