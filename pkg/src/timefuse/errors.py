"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Input violates a documented precondition or invariant."""


class ShapeError(ValidationError):
    """Tensor/array shape does not match the configured dimensions."""


class ParseError(ValueError):
    """A serialized record could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ConfigError(ValueError):
    """Run configuration is malformed or inconsistent."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss and was aborted."""
