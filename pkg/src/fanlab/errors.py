class FanError(Exception):
    """Base class for all errors raised by fanlab."""

    exit_code = 1


class ConfigurationError(FanError, ValueError):
    pass


class ContractError(FanError, ValueError):
    pass


class ParseError(FanError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DataError(FanError):
    pass


class NumericalError(FanError, ArithmeticError):
    exit_code = 2


class TrainingDiverged(NumericalError):
    pass
