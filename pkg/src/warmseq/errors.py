"""Exception hierarchy.

Each family maps to a distinct CLI exit code (see ``warmseq.cli``).
"""


class WarmseqError(Exception):
    exit_code = 1


class ConfigError(WarmseqError):
    exit_code = 2

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatError(WarmseqError):
    """Malformed archive, vocabulary, rules or data file."""

    exit_code = 3


class ShapeError(WarmseqError):
    exit_code = 4


class LengthError(ShapeError):
    pass


class DegenerateBatchError(WarmseqError):
    exit_code = 4


class IncompatibleCheckpointError(WarmseqError):
    exit_code = 5


class SchemeError(WarmseqError):
    exit_code = 5


class SelectionError(WarmseqError):
    exit_code = 5


class RuleError(WarmseqError):
    exit_code = 3


class TrainingError(WarmseqError):
    exit_code = 6

    def __init__(self, message, step=None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class OptimizerDivergenceError(TrainingError):
    pass


class DegenerateDatasetError(WarmseqError):
    exit_code = 4
