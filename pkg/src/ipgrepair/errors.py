"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class IpgError(Exception):
    exit_code = 4


class ConfigurationError(IpgError, ValueError):
    exit_code = 2


class DimensionError(ConfigurationError):
    """Input or parameter shapes do not line up."""


class InvalidGeometryError(ConfigurationError):
    pass


class DomainError(IpgError, ValueError):
    """Argument outside the domain an operation is defined on."""

    exit_code = 2


class DataFormatError(IpgError, ValueError):
    exit_code = 3


class ParseError(DataFormatError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConsistencyError(DataFormatError):
    pass


class StageError(IpgError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
