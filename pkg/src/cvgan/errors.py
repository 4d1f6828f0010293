"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto distinct exit codes.
"""


class CvganError(Exception):
    exit_code = 1


class ConfigError(CvganError, ValueError):
    """Invalid configuration, unknown names, unsupported hyperparameters."""

    exit_code = 2


class DataError(CvganError, ValueError):
    """Problems with input data: missing files, malformed frames, bad shapes."""

    exit_code = 3


class MissingDataError(DataError):
    pass


class MalformedFrameError(DataError):
    pass


class ParseError(DataError):
    pass


class DegenerateScaleError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class ShapeError(DataError):
    pass


class RangeError(DataError):
    pass


class ScheduleError(ConfigError):
    pass


class ContractError(CvganError, RuntimeError):
    """A sub-network or condition was used against the rules of a model variant."""

    exit_code = 5


class NumericalError(CvganError, ArithmeticError):
    """Non-finite losses or outputs; training and generation abort on these."""

    exit_code = 4
