"""Geometry, loss and evaluation toolkit for voice-to-3D-face reconstruction."""

from voxface.errors import DataError, NumericalError, ToolkitError

__version__ = "0.1.0"

__all__ = ["DataError", "NumericalError", "ToolkitError", "__version__"]
