"""Exception types shared across the package."""


class StiffonetError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(StiffonetError):
    """Tensor shapes are incompatible for the requested operation."""


class SingularBasisError(StiffonetError):
    """A matrix that must be full column rank is (numerically) rank deficient."""


class DomainError(StiffonetError):
    """A value lies outside the mathematical domain of a transform (e.g. log of <= 0)."""


class ConfigError(StiffonetError):
    """Invalid or inconsistent configuration; rejected before any compute."""


class InvalidModeError(StiffonetError):
    """A model method was called in the wrong training/prediction mode."""


class DegenerateUpdateError(StiffonetError):
    """Adaptive weight update impossible: every error measure is exactly zero."""


class TrainingDivergedError(StiffonetError):
    """Loss became NaN/inf during training."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


class IntegrationFailureError(StiffonetError):
    """Implicit integrator failed to converge."""

    def __init__(self, time_index, message=None):
        self.time_index = time_index
        super().__init__(message or f"integration failed near output index {time_index}")


class RolloutDivergenceError(StiffonetError):
    """Autoregressive prediction left the valid state domain."""

    def __init__(self, segment, message=None):
        self.segment = segment
        super().__init__(message or f"recursive prediction diverged at segment {segment}")


class CollapsedCoordinateError(StiffonetError):
    """Simplex map hit a vertex/edge degeneracy (vanishing denominator or singular system)."""


class DataValidationError(StiffonetError):
    """Input data violates a dataset-level invariant (e.g. off-simplex rows)."""


class UndefinedMetricError(StiffonetError):
    """Error metric is undefined for the given reference (e.g. zero-norm trajectory)."""
