"""Exception types shared across the package."""


class ColearnError(Exception):
    pass


class DimensionError(ColearnError, ValueError):
    """Operand shapes are incompatible or an axis is out of range."""


class DomainError(ColearnError, ValueError):
    """An input lies outside the domain of an elementwise function."""


class DegeneracyError(ColearnError, ValueError):
    """A vector is too close to zero to be normalized."""


class ContractError(ColearnError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NonFiniteError(ColearnError, FloatingPointError):
    """A forward pass produced NaN or Inf."""


class ParameterError(ColearnError, ValueError):
    pass


class FormatError(ColearnError, ValueError):
    """A binary file does not match its documented layout."""


class ConfigError(ColearnError, ValueError):
    """Invalid experiment configuration. ``path`` names the offending key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class TrainingError(ColearnError, RuntimeError):
    pass
