"""Exception types shared across the package."""


class FlexiError(Exception):
    """Base class for all package errors."""


class DimensionError(FlexiError, ValueError):
    """Array shapes do not conform."""


class ConfigurationError(FlexiError, ValueError):
    """A configuration value is missing, inconsistent or out of range."""


class DomainError(FlexiError, ValueError):
    """An argument lies outside the domain of a closed-form solution."""


class UsageError(FlexiError, RuntimeError):
    """An API was called in a way it does not support."""


class StateError(FlexiError, RuntimeError):
    """An object is not in the state required for the call."""


class TrainingDivergedError(FlexiError, RuntimeError):
    """Training produced a non-finite loss.

    ``snapshot`` holds the offending batch metadata and the loss terms so the
    failure can be reproduced offline.
    """

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
