"""Exception types shared across the toolkit."""


class CbvfError(Exception):
    """Base class for all toolkit errors."""


class DomainError(CbvfError):
    """State is outside the region where the dynamics are defined."""


class ConfigError(CbvfError):
    """Inconsistent or unusable configuration."""


class SingularDirection(CbvfError):
    """The control maximizer is not unique for the given direction."""


class IntegrationDrift(CbvfError):
    """A conserved quantity drifted beyond tolerance during integration."""


class InsufficientBoundaryPoints(CbvfError):
    """Could not collect enough converged boundary points after retries."""


class NumericalBlowup(CbvfError):
    """NaN/Inf detected while marching the value function."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"non-finite values at march step {step}")


class ExtrapolationError(CbvfError):
    """Query point lies outside the stored value-function domain."""


class TrainingDiverged(CbvfError):
    """Training loss exploded relative to its initial value."""


class DegenerateSafeSet(CbvfError):
    """No states with nonnegative value found in the sampling region."""


class EmptyUnionError(CbvfError):
    """IOU is undefined because both sets are empty."""


class VersionError(CbvfError):
    """Serialized artifact has an incompatible schema version."""
