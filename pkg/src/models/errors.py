"""
Error hierarchy shared by every component.

All errors derive from ValueError so call sites that already guard against
invalid input with ``except ValueError`` keep working.
"""

from __future__ import annotations

from typing import Optional


class DetectorError(ValueError):
    """Base class for all errors raised by this package."""


class ShapeError(DetectorError):
    """Tensor dimensions, image sizes or level counts do not agree."""


class ConfigError(DetectorError):
    """Invalid, unknown or inconsistent configuration values."""


class ParseError(DetectorError):
    """
    Malformed annotation input.

    Attributes:
        path: JSON path of the offending value, e.g. ``annotations[3].bbox``.
    """

    def __init__(self, message: str, path: Optional[str] = None) -> None:
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class NumericError(DetectorError):
    """A non-finite value appeared where finite numbers are required."""


class ContractError(DetectorError):
    """An API was called outside its contract (e.g. backward on a vector)."""


__all__ = [
    "ConfigError",
    "ContractError",
    "DetectorError",
    "NumericError",
    "ParseError",
    "ShapeError",
]
