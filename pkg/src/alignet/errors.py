"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`AlignetError`.
Input problems derive from :class:`ValidationError` (CLI exit code 2), numeric
breakdowns from :class:`NumericError` (exit code 3).
"""

from __future__ import annotations


class AlignetError(Exception):
    pass


class ValidationError(AlignetError, ValueError):
    pass


class NumericError(AlignetError, ArithmeticError):
    pass


# embed-store
class BadMagic(ValidationError):
    pass


class TruncatedFile(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class IoFailure(AlignetError, OSError):
    pass


class FormatError(ValidationError):
    """Malformed text row (wrong column count, unparsable number)."""


class DuplicateIndexInTriple(ValidationError):
    pass


class DuplicateIndex(DuplicateIndexInTriple):
    pass


class ChoiceNotInTriple(ValidationError):
    pass


class SoftNotNormalized(ValidationError):
    pass


class IndexOutOfRange(ValidationError, IndexError):
    pass


# kernels and models
class EmptyDataset(ValidationError):
    pass


class EmptyBatch(EmptyDataset):
    pass


class LengthMismatch(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class NonFiniteLoss(NumericError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


# clustering and sampling
class KTooLarge(ValidationError):
    pass


class TooFewCandidates(ValidationError):
    pass


class TooFewItems(ValidationError):
    pass


class DegenerateLabels(ValidationError):
    pass


class DegenerateClusters(DegenerateLabels):
    pass


# evaluation
class ZeroVarianceRow(ValidationError):
    pass


class ConstantInput(ValidationError):
    pass


class MissingRt(ValidationError):
    pass


class TooFewResponses(ValidationError):
    pass


class NoPairsInLevel(ValidationError):
    pass


class ComponentsTooMany(ValidationError):
    pass


# cli
class ConfigError(ValidationError):
    pass


class StageError(AlignetError):
    """Wraps a failure inside a pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
