"""Exception hierarchy shared by every latst module."""


class LatstError(Exception):
    """Base class for all errors raised by latst."""


class DimensionError(LatstError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(LatstError, ValueError):
    """A value lies outside the domain of an operation (e.g. log of a non-positive)."""


class ContractError(LatstError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericalError(LatstError, ArithmeticError):
    """A computation produced non-finite values where that must not happen."""


class GradientCheckError(LatstError):
    """Finite-difference checking hit a non-finite intermediate."""


class ConfigError(LatstError, ValueError):
    """Invalid configuration value, key, or combination."""


class DataLoadError(LatstError):
    """A dataset file could not be parsed."""


class TrainingInstabilityError(NumericalError):
    """Training produced a non-finite gradient or loss."""


class CheckpointFormatError(LatstError):
    """A checkpoint file is malformed or has the wrong magic."""


class ShapeMismatchError(LatstError, ValueError):
    """Stored tensors do not match the shapes a configuration expects."""
