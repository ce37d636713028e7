"""
Exception types shared by the SSPDA modules.
Library code raises these; only cli.py turns them into exit codes.
"""


class SspdaError(Exception):
    """Base class for every error raised by this project."""


class DimensionError(SspdaError, ValueError):
    """Tensor or array shapes are incompatible."""


class ParameterError(SspdaError, ValueError):
    """A parameter is outside its valid range."""


class LabelIndexError(SspdaError, IndexError):
    """A class or permutation label is outside [0, C)."""


class ContractError(SspdaError, ValueError):
    """Input data violates an operation's precondition."""


class GraphError(SspdaError, RuntimeError):
    """A recorded graph was used incorrectly."""


class TrainingDivergedError(SspdaError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = list(terms or [])


class ConfigError(SspdaError, ValueError):
    """Problem in an experiment configuration file."""

    def __init__(self, message, key=None, line=None):
        location = ''
        if line is not None:
            location += f"line {line}: "
        if key is not None:
            location += f"{key}: "
        super().__init__(f"{location}{message}")
        self.key = key
        self.line = line


class DataFormatError(SspdaError, ValueError):
    """An image file could not be decoded."""
