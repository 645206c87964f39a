"""Exception hierarchy shared by all modules."""


class PemlError(Exception):
    pass


class DimensionError(PemlError, ValueError):
    pass


class NumericError(PemlError, ArithmeticError):
    pass


class ContractError(PemlError, ValueError):
    pass


class ConfigurationError(PemlError, ValueError):
    pass


class ParameterError(ConfigurationError):
    pass


class TaskError(PemlError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class StateError(PemlError, RuntimeError):
    pass


class DataError(PemlError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, field=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if field is not None:
            loc.append(f"field {field!r}")
        if loc:
            message = f"{', '.join(loc)}: {message}"
        super().__init__(message)
        self.line = line
        self.field = field


class HpoError(PemlError, RuntimeError):
    pass
