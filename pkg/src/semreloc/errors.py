"""Exception types raised across the package."""


class SemrelocError(Exception):
    """Base class for all package errors."""


class InvalidArgument(SemrelocError, ValueError):
    pass


class ProjectionDegenerate(SemrelocError):
    """The ellipsoid does not project to a proper ellipse for this camera."""


class FitDegenerate(SemrelocError):
    pass


class IntegrationError(SemrelocError):
    pass


class NotVisible(SemrelocError):
    pass


class AlignmentError(SemrelocError):
    """Results and ground truth cannot be paired by timestamp."""


class DatasetError(SemrelocError):
    pass
