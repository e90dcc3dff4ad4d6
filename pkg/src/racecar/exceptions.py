"""Exception hierarchy shared by all racecar modules."""


class RacecarError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RacecarError, ValueError):
    pass


class NumericError(RacecarError, ArithmeticError):
    """Raised when a computation produces non-finite values or fails to converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class BuildError(RacecarError, ValueError):
    pass


class ContractError(RacecarError, ValueError):
    pass


class ParseError(RacecarError, ValueError):
    """Malformed binary input; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TrainingError(RacecarError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message if epoch is None else f"{message} (epoch {epoch})")
        self.epoch = epoch


class ConfigError(RacecarError, ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class CalibrationError(RacecarError, ValueError):
    pass
