"""Exception hierarchy shared across the package."""


class BoeLabError(Exception):
    """Base class for every error raised by boelab."""


class ContractError(BoeLabError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ShapeError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(BoeLabError, ArithmeticError):
    """A computation produced or received non-finite values."""


class DegenerateScheduleError(ContractError):
    """The noise schedule makes a posterior undefined (e.g. 1 - alpha_t == 0)."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""


class CheckpointError(BoeLabError, IOError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class AuditError(BoeLabError, AssertionError):
    """A recorded trace disagrees with the counters the algorithm implies."""


class ConfigError(BoeLabError, ValueError):
    """An experiment configuration file could not be parsed or validated."""

    def __init__(self, message, *, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
