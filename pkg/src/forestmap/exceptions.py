"""Exception types raised across the package."""


class ForestMapError(Exception):
    """Base class for all package errors."""


class ParseError(ForestMapError):
    """A file could not be parsed under its declared format."""


class ValidationError(ForestMapError, ValueError):
    """Input data violates a documented invariant (NaN, wrong shape, ...)."""


class ConfigError(ValidationError):
    """A configuration value is out of its admissible range."""


class InsufficientPointsError(ForestMapError):
    """Too few points for the requested operation."""


class EmptyScanError(InsufficientPointsError):
    """Every point of a scan was removed by the input filters."""


class RegistrationError(ForestMapError):
    """ICP could not find enough correspondences.

    The initial estimate is kept on the exception so callers can fall back to it.
    """

    def __init__(self, message, initial=None):
        super().__init__(message)
        self.initial = initial


class DegenerateFitError(ForestMapError):
    """A geometric fit has no unique solution (collinear points, parallel normals)."""


class DivergenceError(ForestMapError):
    """Non-linear cylinder refinement left the plausible radius range."""


class FitFailure(ForestMapError):
    """No RANSAC candidate gathered enough inliers, or a slice was too sparse."""


class EmptyReportError(ForestMapError):
    """Every observation was excluded before metrics could be computed."""
