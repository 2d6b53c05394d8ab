"""Exception types shared across the package."""


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class ContractError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class DegenerateInputError(ValueError):
    """Input has no usable positions (everything masked)."""


class VocabularyError(ValueError):
    pass


class LengthError(ValueError):
    pass


class InputError(ValueError):
    pass


class IngestionError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class TrainingError(RuntimeError):
    pass
