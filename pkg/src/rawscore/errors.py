"""Exception hierarchy shared by all rawscore modules.

Exit-code mapping for the CLI lives in `rawscore.cli`; every error raised by
library code derives from RawscoreError so callers can catch one base class.
"""


class RawscoreError(Exception):
    """Base class for all rawscore errors."""


class ValidationError(RawscoreError):
    """A precondition or input invariant was violated."""


class InvalidSpec(ValidationError):
    pass


class TooFewReplicates(ValidationError):
    pass


class InsufficientLevels(ValidationError):
    pass


class WrongBitDepth(ValidationError):
    pass


class DimMismatch(ValidationError):
    pass


class DegenerateLabels(ValidationError):
    pass


class DegenerateProfile(ValidationError):
    pass


class DegenerateSpread(ValidationError):
    pass


class EmptyPairing(ValidationError):
    pass


class EmptyOrgan(ValidationError):
    pass


class TooFewAngles(ValidationError):
    pass


class NonSquare(ValidationError):
    pass


class GeometryMismatch(ValidationError):
    pass


class IoError(RawscoreError):
    """File-level failure (missing, unreadable, short write)."""


class IoFailure(IoError):
    pass


class CorruptFile(IoError):
    pass


class UnsupportedFormat(RawscoreError):
    """The file is readable but uses a TIFF/JPEG variant we reject."""


class MismatchError(RawscoreError):
    """Two artifacts that must belong together do not."""


class ModelMismatch(MismatchError):
    pass


class RecipeMismatch(MismatchError):
    pass


class SchemaViolation(MismatchError):
    pass


class NumericalError(RawscoreError):
    """A fit or encode step failed to produce a usable result."""


class NonPhysicalFit(NumericalError):
    pass


class FitDiverged(NumericalError):
    pass


class NoPeak(NumericalError):
    pass


class NoRoot(NumericalError):
    pass


class EncodeFailure(NumericalError):
    pass
