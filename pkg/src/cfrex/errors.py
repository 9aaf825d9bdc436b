"""Exception types shared across the package."""

from __future__ import annotations


class CfrexError(Exception):
    """Base class for all library errors."""


class InputError(CfrexError):
    """Bad or inconsistent input data (files, schemas, configs)."""


class ParseError(InputError):
    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class DimensionMismatch(InputError):
    def __init__(self, message: str, key=None, expected: int | None = None, got: int | None = None):
        self.key = key
        self.expected = expected
        self.got = got
        super().__init__(message)


class MissingEmbedding(InputError):
    def __init__(self, slot):
        self.slot = slot
        super().__init__(f"no embedding for token slot {slot!r} and no fallback configured")


class UnknownCategory(InputError):
    def __init__(self, feature: str, value):
        self.feature = feature
        self.value = value
        super().__init__(f"unknown value {value!r} for categorical feature {feature!r}")


class NotApplicable(CfrexError):
    """The requested explanation is undefined for this pair (e.g. item not in top-K)."""


class DivergenceError(CfrexError):
    """Training produced a non-finite loss."""
