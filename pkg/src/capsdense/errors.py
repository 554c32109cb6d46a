"""Exception hierarchy shared by every module."""


class CapsDenseError(Exception):
    """Base class for all package errors."""


class DimensionError(CapsDenseError, ValueError):
    """Operand shapes disagree."""


class ContractError(CapsDenseError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(CapsDenseError, ValueError):
    """A model or training configuration is invalid."""


class FormatError(CapsDenseError, ValueError):
    """A data file does not match its binary format."""


class IntegrityError(CapsDenseError):
    """A checkpoint failed its checksum or is truncated."""


class NumericalError(CapsDenseError, FloatingPointError):
    """A non-finite value appeared during training or checking."""
