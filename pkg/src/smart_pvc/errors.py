"""Exception classes. Each maps onto one CLI exit code."""


class SmartError(Exception):
    exit_code = 1


class ConfigError(SmartError, ValueError):
    exit_code = 2


class DataError(SmartError, ValueError):
    exit_code = 3


class NumericError(SmartError, ArithmeticError):
    exit_code = 4
