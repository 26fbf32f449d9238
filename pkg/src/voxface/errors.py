"""Exception hierarchy shared by every module."""


class ToolkitError(Exception):
    """Base class for errors raised by voxface."""


class DataError(ToolkitError, ValueError):
    """Invalid input data: shape mismatch, malformed file, bad index."""


class NumericalError(ToolkitError, ArithmeticError):
    """A computation cannot proceed: singular system, degenerate geometry."""
