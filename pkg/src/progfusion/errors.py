"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(ValueError):
    """A caller violated a documented precondition."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(ValueError):
    """Malformed file on disk (header/payload mismatch, bad schema)."""


class TrainingError(RuntimeError):
    """Training diverged or otherwise failed mid-run."""
