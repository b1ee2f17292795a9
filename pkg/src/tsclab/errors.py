class TscLabError(Exception):
    """Base class for errors raised by tsclab."""


class DimensionError(TscLabError, ValueError):
    def __init__(self, what: str, expected, actual):
        super().__init__(f"{what}: expected {expected}, got {actual}")
        self.what = what
        self.expected = expected
        self.actual = actual


class LayoutError(TscLabError, ValueError):
    pass


class DataError(TscLabError, ValueError):
    pass


class ParseError(TscLabError, ValueError):
    def __init__(self, path, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class ConfigError(TscLabError, ValueError):
    pass


class SchemaError(TscLabError, ValueError):
    pass
