"""Exception hierarchy.

Every error carries a class name that the CLI prints verbatim as the first
token of its single-line failure message, so scripts can match on it.
"""

from __future__ import annotations


class CoughSSLError(Exception):
    """Base class for all library errors."""


# features
class AudioTooShort(CoughSSLError):
    pass


class InvalidConfig(CoughSSLError):
    pass


class ParseError(CoughSSLError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class SplitViolation(CoughSSLError):
    def __init__(self, participant_id: str, message: str):
        self.participant_id = participant_id
        super().__init__(f"participant {participant_id!r}: {message}")


# diffcore
class ShapeMismatch(CoughSSLError):
    pass


class NonFiniteValue(CoughSSLError):
    pass


class NonScalarLoss(CoughSSLError):
    pass


class MissingGradient(CoughSSLError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"parameter {name!r} received no gradient")


class ContainerFormatError(CoughSSLError):
    pass


# encoder / downstream
class ConfigMismatch(CoughSSLError):
    pass


class EmptySplit(CoughSSLError):
    pass


class EmptyList(CoughSSLError):
    pass


# contrastive
class InsufficientParticipants(CoughSSLError):
    pass


class ZeroNorm(CoughSSLError):
    pass


class NonPositiveTemperature(CoughSSLError):
    pass


# evalbench
class DegenerateLabels(CoughSSLError):
    pass


class EmptyBenchmark(CoughSSLError):
    pass
