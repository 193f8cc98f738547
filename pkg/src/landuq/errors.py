"""Shared exception types.

The split mirrors how failures are reported: configuration problems are
caller mistakes, shape/contract violations are programming errors at call
sites, numeric aborts and data errors map to distinct CLI exit codes.
"""


class ShapeError(ValueError):
    """Array dimensions do not conform to an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration value or flag combination."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(RuntimeError):
    """Non-finite value encountered where finiteness is required."""


class DataError(RuntimeError):
    """Missing, malformed, or inconsistent data files."""


class GenerationError(RuntimeError):
    """Procedural generation failed to satisfy its invariants."""
