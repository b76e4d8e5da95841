"""Exception types raised across the package."""


class IMGError(Exception):
    """Base class for package errors."""


class ConfigError(IMGError, ValueError):
    """Invalid configuration (bad dimension, unknown key, odd kernel, ...)."""


class InvalidInputError(IMGError, ValueError):
    """Input data violates an operation's precondition."""


class FormatError(IMGError, ValueError):
    """A feature or annotation file cannot be parsed."""


class ValidationError(IMGError, ValueError):
    """A parsed record has values outside its allowed range."""


class TrainingDivergenceError(IMGError, RuntimeError):
    """A loss became non-finite during training."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
