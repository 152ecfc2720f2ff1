class EtrialsError(Exception):
    """Base class; ``exit_code`` is what the command line returns."""

    exit_code = 3


class SchemaError(EtrialsError):
    exit_code = 2

    def __init__(self, message, file=None, line=None, column=None):
        self.file = file
        self.line = line
        self.column = column
        where = []
        if file is not None:
            where.append(f"file={file}")
        if line is not None:
            where.append(f"line={line}")
        if column is not None:
            where.append(f"column={column}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class MissingRequiredFile(EtrialsError):
    exit_code = 2


class ConflictingAssignment(EtrialsError):
    exit_code = 2


class DomainError(EtrialsError, ValueError):
    exit_code = 3


class ValidationFailed(EtrialsError):
    """Row-level validation found errors; ``report`` holds the details."""

    exit_code = 2

    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)
