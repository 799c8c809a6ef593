"""Exception hierarchy shared across the package.

The CLI maps the three top-level families to exit codes:
ConfigError -> 2, DataError -> 3, NumericalError -> 4.
"""


class DeepCueError(Exception):
    pass


class ConfigError(DeepCueError, ValueError):
    pass


class DataError(DeepCueError, ValueError):
    pass


class NumericalError(DeepCueError, ArithmeticError):
    pass


class DimensionError(ConfigError):
    """Array shapes do not conform."""


class ContractError(ConfigError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(DataError):
    pass


class SplitError(ConfigError):
    pass


class SamplingError(DataError):
    pass


class LengthError(DataError):
    """Audio or spectrogram shorter than required."""


class MissingAudioError(DataError):
    pass


class ColdStartError(DataError):
    """An index-based item tower was asked to embed an item it never saw."""


class EvaluationError(DataError):
    pass


class DegenerateVectorError(NumericalError):
    pass


class DegenerateStatisticsError(NumericalError):
    pass


class LookupIndexError(ConfigError, IndexError):
    pass
