class QuantError(Exception):
    """Base class for errors raised by fqint."""


class ContractViolation(QuantError, ValueError):
    """An operation was called outside its precondition."""


class DimensionError(QuantError, ValueError):
    pass


class ArithmeticOverflow(QuantError, ArithmeticError):
    """An integer result would not fit its accumulator; never wrapped silently."""


class CalibrationError(QuantError, ValueError):
    pass


class FormatError(QuantError, ValueError):
    """Malformed model or dataset container."""
