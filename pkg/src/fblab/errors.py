"""Exception types shared across fblab."""


class FblabError(Exception):
    """Base class for fblab errors."""


class DomainError(FblabError, ValueError):
    """A point, ball or pullback leaves the grid it is evaluated on."""


class ParameterError(FblabError, ValueError):
    """An argument violates a documented precondition."""


class PreconditionError(FblabError, ValueError):
    """A mathematical hypothesis of an audit does not hold at the query point."""


class ResolutionError(FblabError, ValueError):
    """The requested scale is below what the grid can resolve."""
