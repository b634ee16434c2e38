"""Exception hierarchy.

Every error raised on purpose by the library derives from `KinfitError`, so
callers (and the CLI) can separate input-validation failures from estimation
failures without string matching.
"""


class KinfitError(Exception):
    """Base class. ``details`` carries machine-readable context (scene id...)."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


class ValidationError(KinfitError):
    """Input does not satisfy a precondition."""


class EstimationError(KinfitError):
    """Input was valid but a solver could not produce an estimate."""


# core
class EmptyCloud(ValidationError):
    pass


# ingest
class SchemaError(ValidationError):
    pass


class MissingFile(ValidationError):
    pass


class InconsistentParts(ValidationError):
    pass


class MalformedPly(ValidationError):
    pass


class UnsupportedFormat(ValidationError):
    pass


class MalformedImage(ValidationError):
    pass


class PartNotInMask(ValidationError):
    pass


class NoValidDepth(ValidationError):
    pass


class MissingPart(ValidationError):
    pass


# registration
class DegenerateCloud(EstimationError):
    pass


class NoCorrespondences(EstimationError):
    pass


class AllOutliers(EstimationError):
    pass


# joints
class MissingScene(ValidationError):
    pass


class DegenerateMotion(EstimationError):
    pass


class AmbiguousAxisWarning(UserWarning):
    """Every observed rotation is close to a half turn; the axis sign is arbitrary."""


# structure
class MissingPairScore(ValidationError):
    pass


class MissingJointValue(ValidationError):
    pass


class InvalidTree(ValidationError):
    pass


# synth
class InvalidSpec(ValidationError):
    pass


class PartSetMismatch(ValidationError):
    pass
