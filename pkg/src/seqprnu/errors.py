"""Exception hierarchy shared by all modules."""


class PrnuError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(PrnuError, ValueError):
    pass


class DegenerateInputError(PrnuError, ValueError):
    pass


class InsufficientDataError(PrnuError, ValueError):
    pass


class ImageFormatError(PrnuError):
    pass


class DataError(PrnuError, ValueError):
    pass


class DomainError(PrnuError, ValueError):
    pass


class FitError(PrnuError):
    """Iterative fit did not converge; ``last`` holds the final iterate."""

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class BoundViolationError(PrnuError, ValueError):
    """Requested detection probability exceeds what contamination allows."""

    def __init__(self, message, max_pd):
        super().__init__(message)
        self.max_pd = max_pd
