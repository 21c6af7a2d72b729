"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class NumericalError(ArithmeticError):
    """A result contains NaN or infinity."""


class ConfigError(ValueError):
    """Invalid model or experiment configuration."""


class PreconditionError(ValueError):
    """An operation was called outside its domain."""


class DegenerateInputError(ValueError):
    """Input carries no usable signal (all-zero features, undefined ratios)."""


class ContractError(ValueError):
    """Input violates a documented contract, e.g. non-stochastic attention rows."""


class InputError(OSError):
    """A data file is missing, unreadable or empty."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
