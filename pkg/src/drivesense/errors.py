"""Exception hierarchy shared across the package.

Three top-level families map onto CLI exit codes: bad invocations or
arguments (1), problems with the data itself (2), and numerical failures (3).
"""


class DrivesenseError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ValidationError(DrivesenseError):
    """Invalid arguments, configuration, or precondition violations."""

    exit_code = 1


class DataError(DrivesenseError):
    """The supplied data cannot support the requested operation."""

    exit_code = 2


class NumericError(DrivesenseError):
    """A numerical procedure failed or is ill-posed."""

    exit_code = 3


class SchemaError(DataError):
    """A required column is missing from a trace file."""


class TraceParseError(DataError):
    """A trace file row is malformed; message names the offending row."""


class DegenerateSegmentError(DataError):
    """Segment has no moving time, so per-distance features are undefined."""


class MissingDataError(DataError):
    """No observation exists for the requested key."""


class MissingDonorError(DataError):
    """The donor pair has no observation on the requested segment."""


class UntrainedModelError(DataError):
    """No trained energy model is available for the pair."""


class CoverageError(DataError):
    """A factorization input has an empty row or column."""


class EmptyCoverageError(DataError):
    """No data source covers any segment of the requested route."""


class UnderdeterminedError(NumericError):
    """Fewer samples than coefficients; the regression is underdetermined."""


class SingularSystemError(NumericError):
    """The regression normal equations are singular even after damping."""


class DegenerateDesignError(NumericError):
    """The adjustment design matrix is rank deficient."""


class DivergenceError(NumericError):
    """The factorization objective is growing; try a smaller learning rate."""
