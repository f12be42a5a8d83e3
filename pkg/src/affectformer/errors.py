"""Exception hierarchy.

Every error raised on purpose by the package derives from ``AffectError`` so
the command line can map it to an exit code without catching unrelated bugs.
"""


class AffectError(Exception):
    exit_code = 2


class DimensionError(AffectError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(AffectError, ValueError):
    """A configuration value is invalid or inconsistent."""


class WindowError(AffectError, ValueError):
    """A window is longer than the model's maximum length."""


class ContractError(AffectError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class FormatError(AffectError, ValueError):
    """A file does not match its binary or text layout."""

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DataError(AffectError, ValueError):
    """File contents parse but hold invalid values (NaN, out-of-range labels)."""


class AlignmentError(DataError):
    """Two per-frame sources disagree on their frame ids."""


class EvaluationError(AffectError, ValueError):
    """A metric was asked to score an empty input."""


class SkipBatch(AffectError):
    """Too few valid frames for a loss term; the caller skips the term."""


class NonFiniteGradient(AffectError, FloatingPointError):
    exit_code = 4

    def __init__(self, param_name):
        self.param_name = param_name
        super().__init__(f"non-finite gradient for parameter {param_name!r}")
