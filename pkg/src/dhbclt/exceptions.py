"""Exception hierarchy shared across the package."""


class DHBCError(Exception):
    """Base class for all package errors."""


class DegenerateCovarianceError(DHBCError, ValueError):
    """A covariance matrix is singular, indefinite or numerically degenerate."""


class DimensionMismatchError(DHBCError, ValueError):
    pass


class CohortValidationError(DHBCError, ValueError):
    """Input data violates the cohort contract (schema, missingness, consistency).

    ``diagnostics`` holds one human-readable line per offending row/subject.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])


class ChangepointOrderError(DHBCError, ValueError):
    pass


class GridCoverageError(DHBCError, ValueError):
    pass


class UnassignableSubjectError(DHBCError):
    """Every candidate cluster gives the subject zero likelihood."""


class NonConvergenceWarning(UserWarning):
    pass


class DegenerateSplitWarning(UserWarning):
    pass


class NumericalFailure(DHBCError):
    """A run failed numerically; ``partial`` carries the last stable state."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial
