"""Exception hierarchy shared by every module."""


class WiCoError(Exception):
    """Base class for all package errors."""


class DimensionError(WiCoError, ValueError):
    pass


class InvalidInputError(WiCoError, ValueError):
    pass


class CorruptFileError(WiCoError, ValueError):
    """A dump, checkpoint or results file could not be decoded."""


class EvaluationError(WiCoError, ArithmeticError):
    pass


class TrainingError(WiCoError, RuntimeError):
    pass


class ConfigError(WiCoError, ValueError):
    pass


class GenerationError(WiCoError, RuntimeError):
    pass
