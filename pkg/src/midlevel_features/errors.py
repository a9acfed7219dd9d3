# src/midlevel_features/errors.py
"""
Exception hierarchy shared by every module.

All errors derive from MidlevelError so the CLI can map them to exit code 2.
"""


class MidlevelError(Exception):
    """Base class for all toolkit errors"""


class InvalidArgument(MidlevelError, ValueError):
    """A precondition on an argument does not hold"""


# audio / dsp
class AudioError(MidlevelError):
    pass


class UnsupportedFormat(AudioError):
    pass


class CorruptFile(AudioError):
    pass


class ClipTooShort(AudioError):
    pass


class InvalidRange(AudioError):
    pass


class InvalidMelCount(AudioError):
    pass


class TooFewFrames(AudioError):
    pass


# extractors
class ExtractorError(MidlevelError):
    pass


class InvalidFrequency(ExtractorError):
    pass


class EnvelopeTooShort(ExtractorError):
    pass


# annotation
class AnnotationError(MidlevelError):
    pass


class EmptyInput(AnnotationError):
    pass


class TooFewSongs(AnnotationError):
    pass


class IncompleteMatrix(AnnotationError):
    pass


class DegenerateVariance(AnnotationError):
    pass


class ConstantFeature(AnnotationError):
    def __init__(self, feature, message=None):
        self.feature = feature
        super().__init__(message or f"feature '{feature}' has zero variance")


# statmodels
class StatsError(MidlevelError):
    pass


class LengthMismatch(StatsError):
    pass


class ConstantInput(StatsError):
    pass


class TooFewItems(StatsError):
    pass


class TooFewGroups(StatsError):
    pass


class SingularSystem(StatsError):
    pass


class TooFewRows(StatsError):
    pass


class NonPositiveHyperparam(StatsError):
    pass


class DegenerateClass(StatsError):
    pass


class SingleClass(StatsError):
    pass


class InsufficientOverlap(StatsError):
    pass


# neuralnet
class NetworkError(MidlevelError):
    pass


class ShapeMismatch(NetworkError):
    pass


class StaleCache(NetworkError):
    pass


class EmptyDataset(NetworkError):
    pass


class MissingHead(NetworkError):
    pass


# dataset io
class DatasetError(MidlevelError):
    pass


class UnknownSchema(DatasetError):
    pass


class OutOfRangeRating(DatasetError):
    pass


class SelfComparison(DatasetError):
    pass


class UnknownFeature(DatasetError):
    pass


class DuplicateSongId(DatasetError):
    pass


class IoFailure(DatasetError):
    pass


class NetworkFailure(DatasetError):
    pass


class ChecksumMismatch(DatasetError):
    pass


# cli
class CliError(MidlevelError):
    pass


class NoInputs(CliError):
    pass


class MissingCheckpoint(CliError):
    pass


class ConfigError(CliError):
    pass
