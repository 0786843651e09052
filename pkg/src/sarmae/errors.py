"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class EvaluationError(ArithmeticError):
    """A function value or loss became non-finite."""


class ParameterError(ValueError):
    pass


class EstimatorError(ArithmeticError):
    pass


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(ValueError):
    pass
