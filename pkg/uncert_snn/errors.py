"""Error kinds raised by the engine. The CLI maps every UncertError to exit code 2."""


class UncertError(Exception):
    """Root of all engine errors."""


class ShapeError(UncertError, ValueError):
    pass


class TokenIndexError(UncertError, IndexError):
    pass


class InvalidArgumentError(UncertError, ValueError):
    pass


class ConfigurationError(UncertError, ValueError):
    pass


class ContractViolation(UncertError, ValueError):
    """A value broke a documented precondition (e.g. negative evidence)."""


class NumericalError(UncertError, ArithmeticError):
    pass


class CountingError(UncertError, OverflowError):
    """An operation counter left the signed 64-bit range."""


class TensorFileError(UncertError, ValueError):
    pass
