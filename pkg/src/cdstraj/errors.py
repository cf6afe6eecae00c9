"""Exception hierarchy shared by every module."""


class CdsTrajError(Exception):
    """Base class for all package errors."""


class ConfigError(CdsTrajError, ValueError):
    pass


class DataError(CdsTrajError, ValueError):
    pass


class SchemaError(DataError):
    pass


class ContractError(CdsTrajError, ValueError):
    """An operation was called outside its preconditions."""


class DimensionError(ContractError):
    pass


class DeterminismError(CdsTrajError, RuntimeError):
    pass


class NumericError(CdsTrajError, ArithmeticError):
    pass
