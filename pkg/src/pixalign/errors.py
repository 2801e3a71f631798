"""Exception hierarchy shared across the package."""


class PixAlignError(Exception):
    pass


class InvalidInputError(PixAlignError, ValueError):
    pass


class DomainError(PixAlignError, ValueError):
    pass


class SingularityError(DomainError):
    pass


class ConfigError(PixAlignError, ValueError):
    pass


class UsageError(PixAlignError, TypeError):
    pass


class NumericalError(PixAlignError, ArithmeticError):
    pass


class SamplerError(NumericalError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class StateError(PixAlignError):
    pass


class CheckpointError(PixAlignError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class DegenerateClassError(PixAlignError, ValueError):
    pass


class InternalInvariantError(PixAlignError, RuntimeError):
    pass
