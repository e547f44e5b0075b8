"""Exception types shared across the package."""


class SpectramapError(Exception):
    """Base class for all package errors."""


class ParameterError(SpectramapError, ValueError):
    """An argument violates a documented precondition."""


class BranchAmbiguityError(SpectramapError, ValueError):
    """Rotation angle is at the principal-branch boundary (pi); the log is ambiguous."""


class GraphFormatError(SpectramapError, ValueError):
    """A graph or trajectory file could not be parsed."""


class GraphValidationError(SpectramapError, ValueError):
    """Parsed data violates a structural invariant (dangling edge, bad ordering, ...)."""


class DegenerateGraphError(SpectramapError, ValueError):
    """Too few nodes to build a meaningful proximity graph."""


class ReductionError(SpectramapError):
    """Node elimination failed (the retained/removed split is singular)."""


class NumericalError(SpectramapError):
    """A numerical routine failed to converge or returned invalid values."""


class SolverError(SpectramapError):
    """Nonlinear least-squares solve failed (singular normal equations)."""


class InsufficientDataError(SpectramapError, ValueError):
    """Not enough associated samples for the requested computation."""


class DuplicateSubmapError(SpectramapError, ValueError):
    """A submap with this (robot, submap) id was already ingested."""


class ConfigError(SpectramapError, ValueError):
    """Scenario configuration is invalid; the message names the offending field."""
