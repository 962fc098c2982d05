"""Exception hierarchy. Each family maps onto one CLI exit code."""


class StclipError(Exception):
    exit_code = 1


class UsageError(StclipError):
    exit_code = 2


class ConfigError(UsageError):
    pass


class DataError(StclipError):
    exit_code = 3


class SchemaError(DataError):
    pass


class ParseError(DataError):
    pass


class IntegrityError(DataError):
    pass


class MatchError(DataError):
    def __init__(self, message, point_index=None):
        super().__init__(message)
        self.point_index = point_index


class SamplingError(DataError):
    pass


class TemplateError(DataError):
    pass


class UnknownSegmentError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NumericError(StclipError, ArithmeticError):
    exit_code = 4


class ShapeError(StclipError, ValueError):
    exit_code = 4


class ContractViolation(StclipError):
    exit_code = 5
