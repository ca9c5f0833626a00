"""Exception hierarchy shared across the package."""

from __future__ import annotations


class StyleFLError(Exception):
    """Base class for every error raised by stylefl."""


class ShapeError(StyleFLError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(StyleFLError, ValueError):
    """An argument lies outside the domain of an operation."""


class NumericError(StyleFLError, ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(StyleFLError, ValueError):
    """Invalid configuration or generator parameters."""

    def __init__(self, message: str, field: str | None = None) -> None:
        super().__init__(message)
        self.field = field


class FormatError(StyleFLError, ValueError):
    """Malformed dataset file."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ProtocolError(StyleFLError, RuntimeError):
    """Client uploads violate the round protocol."""


class EmptyRoundError(StyleFLError, RuntimeError):
    """A server-side quantity is undefined because nothing was uploaded."""
