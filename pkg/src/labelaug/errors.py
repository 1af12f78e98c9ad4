"""Exception hierarchy.

Three families map onto CLI exit codes: configuration problems (2),
bad or mismatched data (3) and broken internal invariants (4).
"""

from __future__ import annotations


class LabelaugError(Exception):
    exit_code = 1


class ConfigError(LabelaugError):
    exit_code = 2


class DataError(LabelaugError):
    exit_code = 3


class InvariantViolation(LabelaugError):
    exit_code = 4


class BadMagic(DataError):
    pass


class DimensionMismatch(DataError):
    pass


class NonFiniteValue(DataError):
    pass


class IoFailure(DataError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnknownClassName(DataError):
    pass


class StageMismatch(DataError):
    pass


class ShapeMismatch(DataError):
    pass


class EmptyClass(DataError):
    pass


class TooFewSamples(DataError):
    pass


class EmptyDataset(DataError):
    pass


class IdMismatch(DataError):
    pass


class SampleError(DataError):
    """A per-sample failure re-raised with the offending sample id attached."""

    def __init__(self, sample_id: str, cause: Exception) -> None:
        self.sample_id = sample_id
        self.cause = cause
        super().__init__(f"sample {sample_id!r}: {cause}")
