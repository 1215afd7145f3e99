"""Exception hierarchy shared by the library and the CLI."""


class SrvccError(Exception):
    """Base class for all errors raised by srvcc."""

    exit_code = 1


class ConfigError(SrvccError, ValueError):
    exit_code = 1


class DimensionError(SrvccError, ValueError):
    exit_code = 1


class DataError(SrvccError, ValueError):
    exit_code = 2


class NumericalError(SrvccError, ArithmeticError):
    """A loss, gradient or activation became non-finite."""

    exit_code = 3


class EmptyFileError(DataError):
    pass


class RaggedRowsError(DataError):
    pass


class NonNumericError(DataError):
    pass
