"""Exception types raised across the package.

Each class name doubles as the machine-parseable error class printed by the CLI.
"""


class RawError(Exception):
    """Base class for all package errors."""


class DimensionError(RawError, ValueError):
    pass


class ContractError(RawError, ValueError):
    pass


class NonFiniteError(RawError, FloatingPointError):
    pass


class InsufficientDataError(RawError, ValueError):
    pass


class CapacityError(RawError, ValueError):
    pass


class ConfigError(RawError, ValueError):
    pass


class DegenerateBatchError(RawError, ValueError):
    pass


class DegenerateTaskError(RawError, ValueError):
    pass


class TrainingDivergedError(RawError, RuntimeError):
    pass


class FormatError(RawError, ValueError):
    """Input file does not parse or has the wrong layout."""
