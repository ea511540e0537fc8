"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: usage/shape/format problems
exit 1, config problems exit 2, numeric faults exit 3.
"""


class VistokError(Exception):
    """Base class for all package errors."""


class ShapeError(VistokError, ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NumericFault(VistokError, ArithmeticError):
    """A computation produced NaN/Inf or an otherwise unusable value."""


class ConfigError(VistokError, ValueError):
    """Invalid configuration file or configuration value."""


class FormatError(VistokError, ValueError):
    """A serialized container is malformed or has the wrong magic/version."""
