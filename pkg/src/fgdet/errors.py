"""Exception hierarchy shared by all modules."""


class FgdetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FgdetError, ValueError):
    """Array shapes disagree.

    ``axes`` names the mismatched axes, e.g. ``("weights.Cin", "input.C")``.
    """

    def __init__(self, message, axes=()):
        super().__init__(message)
        self.axes = tuple(axes)


class DataConsistencyError(FgdetError):
    """Inputs are individually valid but disagree with each other."""
