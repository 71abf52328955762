"""
Exception hierarchy for matrix-normal clustering

ValidationError covers bad inputs (CLI exit 2), NumericFailure covers
factorizations and fits that break down (CLI exit 4).
"""
from typing import Optional


class ValidationError(ValueError):
    """Input failed a precondition"""


class DimensionMismatch(ValidationError):
    pass


class SizeGuardExceeded(ValidationError):
    pass


class AllWeightsZero(ValidationError):
    pass


class InvalidRho(ValidationError):
    pass


class TooSmall(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class TooManyClusters(ValidationError):
    pass


class DatasetFormatError(ValidationError):
    """Malformed dataset file; row is 1-based within the data file"""

    def __init__(self, message: str, row: Optional[int] = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class NumericFailure(ArithmeticError):
    """Numerical breakdown, optionally tagged with where it happened"""

    def __init__(self, message: str, component: Optional[int] = None,
                 iteration: Optional[int] = None):
        self.base_message = message
        self.component = component
        self.iteration = iteration
        super().__init__(message)

    def __str__(self) -> str:
        where = []
        if self.component is not None:
            where.append(f"component={self.component}")
        if self.iteration is not None:
            where.append(f"iteration={self.iteration}")
        if where:
            return f"{self.base_message} ({', '.join(where)})"
        return self.base_message


class NotPositiveDefinite(NumericFailure):
    pass


class EmptyClusterError(NumericFailure):
    pass


class DegenerateClusterInit(NumericFailure):
    pass


class DivergedUpdate(NumericFailure):
    """A penalized mean or covariance update left the finite, data-scaled range"""
