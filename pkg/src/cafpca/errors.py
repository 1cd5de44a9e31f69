"""Exception hierarchy shared by all modules."""


class CafpcaError(Exception):
    """Base class for every error raised by this package."""


class ParseError(CafpcaError):
    """Malformed input file (carries the offending row when known)."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class EmptyInputError(CafpcaError):
    pass


class IntegrityError(CafpcaError):
    """Inputs that are individually valid but inconsistent with each other."""


class DomainError(CafpcaError):
    pass


class WindowUnderflowError(CafpcaError):
    """A smoothing window holds too few samples for the requested fit."""

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class SingularFitError(CafpcaError):
    """Local fit stays degenerate after the bandwidth fallback is exhausted."""

    def __init__(self, message, index=None):
        self.index = index
        super().__init__(message)


class EstimationError(CafpcaError):
    pass


class SelectionError(CafpcaError):
    pass


class ConditioningError(CafpcaError):
    pass


class CriterionUndefinedError(SelectionError):
    pass
