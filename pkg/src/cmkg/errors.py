"""Exception hierarchy shared across the package."""


class CMKGError(Exception):
    """Base class for all errors raised by cmkg."""


class DimensionError(CMKGError, ValueError):
    pass


class LabelError(CMKGError, ValueError):
    pass


class ContractError(CMKGError, RuntimeError):
    pass


class ConfigError(CMKGError, ValueError):
    pass


class StateError(CMKGError, RuntimeError):
    pass


class InputError(CMKGError, ValueError):
    pass


class ParseError(CMKGError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(CMKGError, ValueError):
    pass


class VersionError(CMKGError, ValueError):
    pass
