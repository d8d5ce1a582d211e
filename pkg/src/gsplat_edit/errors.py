"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericAbort -> 4, TransportError -> 5.
"""

from __future__ import annotations


class GsplatError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(GsplatError):
    """Invalid or inconsistent run configuration."""


class DataError(GsplatError):
    """Bad input data: missing paths, malformed files, shape mismatches."""


class ParseError(DataError):
    """Structured file-parse failure.

    Carries the byte offset and, when meaningful, the element index at
    which parsing failed.
    """

    def __init__(self, message: str, *, offset: int | None = None,
                 element: int | None = None):
        detail = message
        if offset is not None:
            detail += f" (byte offset {offset})"
        if element is not None:
            detail += f" (element {element})"
        super().__init__(detail)
        self.offset = offset
        self.element = element


class ContractViolation(GsplatError):
    """A caller broke a documented precondition (usually a shape mismatch)."""


class LocalizationError(GsplatError):
    """Localization failed for a view (or for every view)."""


class NumericAbort(GsplatError):
    """NaN/Inf encountered mid-optimization; carries the diagnostic dump path."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class TransportError(GsplatError):
    """Socket-level failure talking to a guidance/segmentation endpoint."""


class ProtocolError(TransportError):
    """Well-framed but invalid wire content (bad magic, version, type)."""
