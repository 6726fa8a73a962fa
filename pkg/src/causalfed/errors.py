"""Exception hierarchy shared by every module."""


class CausalFedError(Exception):
    pass


class ConfigurationError(CausalFedError, ValueError):
    pass


class ShapeError(CausalFedError, ValueError):
    pass


class InputError(CausalFedError, ValueError):
    pass


class StateError(CausalFedError, RuntimeError):
    pass


class NumericError(CausalFedError, ArithmeticError):
    pass


class ConsistencyError(CausalFedError, ValueError):
    pass


class ProtocolError(CausalFedError, RuntimeError):
    pass


class FormatError(CausalFedError, ValueError):
    """Malformed binary container; ``offset`` is the byte where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
