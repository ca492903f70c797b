"""Exception hierarchy shared by every module."""


class ProtoError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ProtoError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(ProtoError, RuntimeError):
    """A precondition on call order or object state was violated."""


class DataError(ProtoError, ValueError):
    """The dataset cannot support the requested operation."""


class ConfigError(ProtoError, ValueError):
    """A configuration value is out of range."""


class ParseError(ProtoError, ValueError):
    """Malformed `.ts` input. Carries the 1-based line (and column, if known)."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where += ": "
        super().__init__(where + message)


class ModelLoadError(ProtoError, ValueError):
    """A serialized model could not be restored."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")
