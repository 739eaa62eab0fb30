"""Error types. Each maps to a CLI exit code."""


class JoinBoundError(Exception):
    exit_code = 3


class UsageError(JoinBoundError):
    exit_code = 1


class DataError(JoinBoundError):
    exit_code = 2


class SchemaError(DataError):
    pass


class QueryError(DataError):
    """Malformed or unsupported query. ``line``/``column`` point into the SQL text."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            message = f"{message} (line {line}, column {column})"
        super().__init__(message)


class ModelFormatError(DataError):
    pass


class NotFittedError(JoinBoundError):
    pass
