"""Exception types raised across the package."""


class RegditError(Exception):
    """Base class for package errors."""


class DimensionError(RegditError, ValueError):
    pass


class DomainError(RegditError, ValueError):
    pass


class SingularityError(DomainError):
    pass


class ConfigError(RegditError, ValueError):
    pass


class ContractError(RegditError, ValueError):
    pass


class IdempotencyError(RegditError, ValueError):
    pass


class DegenerateBatchError(RegditError, ValueError):
    pass


class FormatError(RegditError, ValueError):
    pass


class IntegrityError(RegditError, ValueError):
    pass


class NonFiniteError(RegditError, FloatingPointError):
    def __init__(self, step, what="loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step
