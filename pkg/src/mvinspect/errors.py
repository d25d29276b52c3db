"""Exception hierarchy.

Three families map onto CLI exit codes: ValidationError -> 2,
IoError -> 1, NumericError -> 3.
"""


class MVInspectError(Exception):
    """Base class for all library errors."""


class ValidationError(MVInspectError):
    """Bad input: schema, precondition, or invariant violation."""


class IoError(MVInspectError):
    """Filesystem-level failure (wraps OSError)."""


class NumericError(MVInspectError):
    """Non-finite values detected mid-computation."""


# geometry

class TooFewCorrespondences(ValidationError):
    pass


class DegenerateConfiguration(ValidationError):
    pass


class DegenerateLine(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


# features / file formats

class BadMagic(ValidationError):
    pass


class VersionMismatch(ValidationError):
    pass


class TruncatedPayload(ValidationError):
    pass


class InvalidTensor(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class AnomalousTrainSample(ValidationError):
    pass


# synth

class DegenerateRig(ValidationError):
    pass


# attention

class MissingMaskPair(ValidationError):
    pass


class StaleCache(ValidationError):
    pass


# pretrain

class TooFewPoints(ValidationError):
    pass


class NoEligibleSupportToken(ValidationError):
    pass


class EmptyTrainSplit(ValidationError):
    pass


# membank

class EmptyView(ValidationError):
    pass


class EmptyBank(ValidationError):
    pass


# metrics

class SingleClass(ValidationError):
    pass


class NoPositives(ValidationError):
    pass
