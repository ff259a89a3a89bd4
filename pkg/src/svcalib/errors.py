"""Exception types shared across the toolkit."""


class CalibrationError(Exception):
    """Base class for all toolkit-specific errors."""


class OutOfDomainError(CalibrationError, ValueError):
    """Angle or radius outside the valid domain of the lens polynomial."""


class OutOfViewError(CalibrationError):
    """Point or pixel falls outside the camera's field of view."""


class NoGroundIntersectionError(CalibrationError):
    """View ray does not descend onto the ground plane."""


class ConvergenceError(CalibrationError, ArithmeticError):
    """Iterative numeric routine failed to converge (invariant violation)."""


class BadInitializationError(CalibrationError):
    """Initial rig leaves too many keypoints without a ground intersection."""


class SolverFailureError(CalibrationError):
    """Optimizer hit a non-finite objective or otherwise broke down."""


class UndefinedMetricError(CalibrationError):
    """Metric has no defined value (e.g. empty overlap between layers)."""


class GeometryError(CalibrationError):
    """Synthetic scene generation could not satisfy the requested geometry."""


class SchemaError(CalibrationError, ValueError):
    """Structured file failed validation; message names the offending path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class VersionError(SchemaError):
    """File declares an unsupported format version."""
