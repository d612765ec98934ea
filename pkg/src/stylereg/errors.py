"""Exception types shared across the toolkit."""


class StyleRegError(Exception):
    """Base class for every error raised by stylereg."""


class InvalidArgumentError(StyleRegError, ValueError):
    pass


class OutOfRangeError(StyleRegError, IndexError):
    pass


class NotFoundError(StyleRegError, LookupError):
    pass


class ConflictError(StyleRegError):
    pass


class PreconditionError(StyleRegError):
    pass


class DivergenceError(StyleRegError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, stage: int, value: float):
        super().__init__(f"non-finite loss {value!r} at stage {stage}, step {step}")
        self.step = step
        self.stage = stage
        self.value = value


class KeywordParseError(StyleRegError, ValueError):
    """No JSON object could be located in a VLM response."""


class KeywordSchemaError(StyleRegError, ValueError):
    """A JSON object was found but does not match the keyword schema."""


class ExtractionFailedError(StyleRegError):
    def __init__(self, message: str, last_response: str | None):
        super().__init__(message)
        self.last_response = last_response


class MissingPlaceholderError(InvalidArgumentError):
    pass


class AmbiguousPlaceholderError(InvalidArgumentError):
    pass


class ManifestValidationError(StyleRegError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ManifestDataError(StyleRegError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class StageError(StyleRegError):
    """Wraps an error raised inside a pipeline stage with the stage label."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
