"""Exception types shared across the package."""


class MSDError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class DegeneratePose(MSDError):
    pass


class DegenerateRotation(MSDError):
    pass


class InvalidFactor(MSDError):
    pass


class InvalidMotion(MSDError):
    pass


class UnknownTemplate(MSDError):
    pass


class EmptyText(MSDError):
    pass


class DimensionMismatch(MSDError):
    pass


class ShapeMismatch(MSDError):
    pass


class NonScalarLoss(MSDError):
    pass


class InvalidSchedule(MSDError):
    pass


class NotOnDdimGrid(MSDError):
    pass


class EmptyDataset(MSDError):
    pass


class DivergedTraining(MSDError):
    pass


class PromptRewriteFailed(MSDError):
    pass


class MissingStyleVocabulary(MSDError):
    pass


class ZeroVelocityContent(MSDError):
    pass


class EmptyInput(MSDError):
    pass


class LengthMismatch(MSDError):
    pass


class MatrixSqrtFailure(MSDError):
    pass


class NoCandidates(MSDError):
    pass


class IOFailure(MSDError):
    exit_code = 4


class CheckpointError(MSDError):
    exit_code = 4


class ConfigInvalid(MSDError):
    exit_code = 2


class MissingArtifact(MSDError):
    exit_code = 3
