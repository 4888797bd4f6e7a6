"""Exception hierarchy shared by every module.

Each class carries the process exit code the command line uses for it.
"""


class TTHError(Exception):
    exit_code = 1


class ConfigError(TTHError):
    exit_code = 2


class DimensionError(ConfigError, ValueError):
    pass


class SpecError(ConfigError):
    """Invalid scene description (e.g. two objects in one cell)."""


class VocabularyError(ConfigError, KeyError):
    pass


class KeywordError(ConfigError, KeyError):
    pass


class IdError(ConfigError, KeyError):
    pass


class FormatError(TTHError):
    """Malformed or truncated artifact file."""

    exit_code = 3


class NumericError(TTHError, ArithmeticError):
    exit_code = 4


class DegenerateInputError(NumericError, ValueError):
    """Zero vectors, empty inputs and similar inputs with no defined result."""


class TrainingError(NumericError):
    pass


class NonConvergenceError(TTHError):
    exit_code = 5
