"""Exception hierarchy shared by every module."""


class HandfuseError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class ContractError(HandfuseError):
    pass


class DimensionError(ContractError, ValueError):
    pass


class ParameterError(ContractError, ValueError):
    pass


class NoHandError(ContractError):
    pass


class SequenceError(ContractError):
    pass


class DataError(ContractError):
    pass


class DependencyError(ContractError):
    pass


class NonFiniteError(ContractError, FloatingPointError):
    pass


class FormatError(HandfuseError, IOError):
    """Malformed container or checkpoint bytes; the CLI maps these to exit code 2."""
