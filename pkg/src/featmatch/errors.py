"""Exception types shared across the package.

The CLI maps these onto process exit codes: InputError -> 2,
GeometryError -> 3, ConfigError -> 4.
"""


class FeatmatchError(Exception):
    """Base class for package errors."""


class InputError(FeatmatchError):
    """Unreadable or malformed input (file, container, image)."""


class GeometryError(FeatmatchError):
    """Shapes or dimensions violate an operation's requirements."""


class WeightsError(InputError):
    """Weight shapes do not chain, or a weights bundle is malformed."""


class ConfigError(FeatmatchError):
    """Invalid parameter value or contract misuse."""
