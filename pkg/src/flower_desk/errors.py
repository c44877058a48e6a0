"""Exception hierarchy shared across the package."""


class FlowerError(Exception):
    """Base class for all package errors."""


class DimensionError(FlowerError, ValueError):
    pass


class NumericError(FlowerError, ArithmeticError):
    pass


class ContractError(FlowerError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(FlowerError, ValueError):
    pass


class RegistrationError(FlowerError, ValueError):
    pass


class LookupFailure(FlowerError, KeyError):
    pass


class FormatError(FlowerError, ValueError):
    """Bad magic, unsupported version or otherwise unreadable container."""


class IntegrityError(FlowerError, ValueError):
    """Container is well-formed up to a point but truncated or inconsistent."""


class RolloutError(FlowerError, RuntimeError):
    pass


class TrainingError(FlowerError, RuntimeError):
    pass


class StageError(FlowerError, RuntimeError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
