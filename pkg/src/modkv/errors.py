"""Exception types shared across the package.

The CLI maps these onto exit codes: parameter problems exit with 2, bad or
inconsistent trace data exits with 3, and anything else is treated as an
internal failure (exit 4).
"""

from __future__ import annotations


class ModkvError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(ModkvError):
    """A configuration value or command-line parameter is invalid."""


class FormatError(ModkvError):
    """A file could not be parsed as any supported container format."""


class ValidationError(ModkvError):
    """Parsed data violates a structural invariant (shapes, sums, causality)."""
