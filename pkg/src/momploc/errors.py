"""Exception types raised across the package."""


class ConfigError(ValueError):
    """Invalid or infeasible configuration."""


class InvalidDirectionError(ValueError):
    """A direction component or vector is outside its valid range."""


class RankDeficientCombinerError(ValueError):
    """A combiner Gram matrix has no Cholesky factor."""


class UndefinedDirectionError(ValueError):
    """DoA cannot be recovered from an all-zero equivalent gain vector."""


class LocalizationError(RuntimeError):
    """Base class for failures of the position estimators."""

    status = "failed"


class DegenerateGeometryError(LocalizationError):
    status = "degenerate"


class InconsistentInputError(LocalizationError):
    status = "inconsistent"


class UnlocatableError(LocalizationError):
    status = "unlocatable"
