"""Exception hierarchy.

Configuration problems and data problems are kept apart so the CLI can map
them to distinct exit codes.
"""


class ReconError(Exception):
    pass


class ConfigError(ReconError, ValueError):
    """A parameter violates its documented constraint."""


class DataError(ReconError, ValueError):
    """Input data is missing, malformed or numerically degenerate."""


class SchemaError(DataError):
    def __init__(self, column: str, path=None):
        self.column = column
        where = f" in {path}" if path is not None else ""
        super().__init__(f"missing column {column!r}{where}")


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyInputError(DataError):
    pass


class MalformedFileError(DataError):
    pass


class DegenerateInputError(DataError):
    pass


class IncompatibleGridError(DataError):
    pass


class StageError(ReconError):
    """Failure inside a pipeline stage; ``cause`` keeps the original error."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
