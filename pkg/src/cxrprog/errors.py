"""Exception types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class DimensionError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class InvalidInputError(ValueError):
    """Input data cannot be processed (empty batch, empty corpus, ...)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given labels (e.g. AUC with one class)."""


class ParseError(ValueError):
    """A record file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class IntegrityError(ValueError):
    """Records are individually valid but inconsistent with each other."""
