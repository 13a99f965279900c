class RiptError(Exception):
    """Base class for library errors."""


class FormatError(RiptError, ValueError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateGeometryError(RiptError, ValueError):
    pass


class InsufficientPointsError(RiptError, ValueError):
    pass


class NumericError(RiptError, ArithmeticError):
    def __init__(self, message, snapshot=None):
        self.snapshot = snapshot
        super().__init__(message if snapshot is None else f"{message} (snapshot: {snapshot})")


class ConfigError(RiptError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
