"""Exception classes shared across the package.

The CLI maps each class to its own exit code.
"""


class LvoError(Exception):
    """Base class for package errors."""


class FormatError(LvoError, ValueError):
    """A file could not be parsed."""


class ShapeError(LvoError, ValueError):
    """Raster or tensor dimensions do not agree."""


class ConfigError(LvoError, ValueError):
    """A pipeline configuration is invalid."""
