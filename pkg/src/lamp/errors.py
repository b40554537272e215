"""Exception types shared across the package."""


class LampError(Exception):
    pass


class ShapeError(LampError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(LampError, ValueError):
    """A configuration value violates a documented constraint."""


class NumericError(LampError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class TrainingError(LampError, RuntimeError):
    """Training cannot proceed (missing gradients, broken freeze contract, ...)."""


class ProjectionError(LampError, ValueError):
    """A point lies at or behind the camera plane."""


class FormatError(LampError, ValueError):
    """A serialized file is malformed, corrupted or of the wrong version."""


class GenerationError(LampError, RuntimeError):
    """Synthetic data generation failed."""
