"""Exception hierarchy shared across the engine.

The CLI maps these onto stable exit codes (see cli.py): ConfigError -> 2,
DataError and subclasses -> 3, NumericError -> 4.
"""


class M3ELError(Exception):
    """Base class for all engine errors."""


class ConfigError(M3ELError):
    """Invalid configuration, hyperparameter, or argument value."""


class ShapeError(M3ELError):
    """Operand shapes or indices violate an operation's contract."""


class DataError(M3ELError):
    """Input data is missing, unresolvable, or malformed."""


class BankFormatError(DataError):
    """A feature-bank file violates the binary format."""


class BadMagicError(BankFormatError):
    """File does not start with the bank magic bytes."""


class VersionMismatchError(BankFormatError):
    """Bank format version is not supported."""


class TruncatedBankError(BankFormatError):
    """File ended before the declared payload was read."""


class NonFiniteBankError(BankFormatError):
    """A stored embedding contains NaN or Inf."""


class NumericError(M3ELError):
    """A computation produced NaN or Inf, or otherwise diverged."""
