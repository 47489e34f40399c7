"""
Exception hierarchy shared by the services and the management commands
"""


class HiMTMError(Exception):
    """Base class for every error raised by this application"""


class ShapeError(HiMTMError, ValueError):
    """Operand shapes do not agree"""


class ContractError(HiMTMError):
    """A precondition of an operation was violated"""


class TapeStateError(HiMTMError):
    """The differentiation tape is in the wrong state for the request"""


class ConfigurationError(HiMTMError):
    """Invalid or inconsistent configuration"""


class InputTooShortError(HiMTMError):
    """A series window is shorter than one coarse patch"""


class NumericalError(HiMTMError, ArithmeticError):
    """NaN or infinite value in a loss, gradient or evaluation"""


class DataError(HiMTMError):
    """Problem with input data, splits or windows"""


class CheckpointError(HiMTMError):
    """Unreadable checkpoint or format version mismatch"""
