"""Exception hierarchy shared by all redinv modules."""


class RedinvError(Exception):
    """Base class for all errors raised by redinv."""


class InvalidInputError(RedinvError, ValueError):
    """Arguments have the wrong shape, live in different spaces, or are out of range."""


class RankError(RedinvError):
    """A set of vectors expected to be independent is (numerically) rank deficient."""

    def __init__(self, message, column=None):
        super().__init__(message)
        self.column = column


class ConditioningError(RedinvError):
    """A Gram matrix is too ill-conditioned to be used safely."""

    def __init__(self, message, pair=None):
        super().__init__(message)
        self.pair = pair


class SingularMatrixError(RedinvError):
    pass


class InstabilityError(RedinvError):
    """Inf-sup constant too small for a stable reconstruction."""

    def __init__(self, message, beta=None):
        super().__init__(message)
        self.beta = beta


class CoercivityError(RedinvError):
    pass


class DomainError(RedinvError, ValueError):
    """A sensor location or support leaves the physical domain."""


class RefinementStarvationError(RedinvError):
    """A parameter cell became thinner than the training grid can resolve."""


class EstimationError(RedinvError):
    pass
