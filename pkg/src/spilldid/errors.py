"""Exception types shared across the package."""


class SpillDidError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(SpillDidError):
    """Input file or config does not match the declared schema."""


class DataValidationError(SpillDidError):
    """Input data violates a documented invariant (bad treatment code, NaN outcome, ...)."""


class ConfigError(SpillDidError):
    """Invalid or inconsistent run configuration."""


class OverlapError(SpillDidError):
    """A required (treatment, exposure) cell is empty or effectively empty."""


class RankError(SpillDidError):
    """Design matrix is rank deficient."""


class ConvergenceError(SpillDidError):
    """Iterative fit failed to converge (separation, ill-conditioning, ...)."""


class DegenerateArmError(SpillDidError):
    """An estimator arm (treated or control) has no usable observations."""


class AssemblyError(SpillDidError):
    """Moment system cannot be assembled from the given specifications."""


class ConditioningError(SpillDidError):
    """A matrix required for solving or inference is numerically singular."""


class InferenceError(SpillDidError):
    """Variance estimation failed (negative variance, non-PSD middle matrix, ...)."""
