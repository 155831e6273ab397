"""Exception types shared across the package."""

from __future__ import annotations


class RegistrationError(Exception):
    """Base class for errors raised by this package."""


class DegenerateGeometryError(RegistrationError):
    """Raised when a geometric solve has no well-defined answer.

    Examples: Procrustes on fewer than 3 pairs or on collinear points,
    SO(3) projection of a matrix with two vanishing singular values.
    """


class ParseError(RegistrationError):
    """Raised on malformed input files.

    Carries the file path and the byte offset at which parsing failed.
    """

    def __init__(self, path: str, byte_offset: int, message: str):
        self.path = str(path)
        self.byte_offset = int(byte_offset)
        super().__init__(f"{path}: byte {byte_offset}: {message}")
