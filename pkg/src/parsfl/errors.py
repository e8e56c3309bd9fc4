"""Exception hierarchy shared by every module."""


class ParsflError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ParsflError, ValueError):
    """Invalid sizes, ranges or settings."""


class ShapeError(ParsflError, ValueError):
    """Array or parameter-vector dimensions do not match the architecture."""


class EmptyShardError(ParsflError, ValueError):
    """A shard with no samples was given where samples are required."""


class MeasurementError(ParsflError, ValueError):
    """A monitored quantity was non-positive or non-finite."""


class ProfileError(ParsflError, KeyError):
    """A worker profile lacks an entry needed for a computation."""


class PlanningError(ParsflError, RuntimeError):
    """No feasible cluster placement exists for some worker."""


class ContractViolation(ParsflError, ValueError):
    """A documented precondition was not met by the caller."""
