"""Exception hierarchy. Names follow the error vocabulary of each module."""


class DriftguardError(Exception):
    pass


# edfio
class EdfError(DriftguardError, ValueError):
    pass


class TruncatedHeader(EdfError):
    pass


class NonNumericField(EdfError):
    pass


class SignalCountMismatch(EdfError):
    pass


class UnknownSignal(EdfError, KeyError):
    pass


class TruncatedRecord(EdfError):
    pass


class MalformedTAL(EdfError):
    pass


class UnknownStageText(EdfError, KeyError):
    pass


class OverlappingAnnotations(EdfError):
    pass


class DiscontinuousRecording(EdfError):
    pass


# dsp
class InvalidBand(DriftguardError, ValueError):
    pass


class InvalidFrequency(DriftguardError, ValueError):
    pass


class IrrationalRatio(DriftguardError, ValueError):
    pass


# nn
class EmptyBatch(DriftguardError, ValueError):
    pass


class TrainModeBatchTooSmall(DriftguardError, ValueError):
    pass


class StaleCache(DriftguardError, RuntimeError):
    pass


class NotADistribution(DriftguardError, ValueError):
    pass


class CheckpointMismatch(DriftguardError, ValueError):
    pass


# train
class NotOneHot(DriftguardError, ValueError):
    pass


class ZeroClassCount(DriftguardError, ValueError):
    pass


class DegeneratePrior(DriftguardError, ValueError):
    pass


class ShapeMismatch(DriftguardError, ValueError):
    pass


class EmptyDataset(DriftguardError, ValueError):
    pass


# tta
class BatchTooSmall(DriftguardError, ValueError):
    pass


class NonFiniteLoss(DriftguardError, FloatingPointError):
    pass


# metrics
class LengthMismatch(DriftguardError, ValueError):
    pass


class EmptyInput(DriftguardError, ValueError):
    pass


class TooShort(DriftguardError, ValueError):
    pass


# synth
class NotStochastic(DriftguardError, ValueError):
    pass


class OnsetOutOfRange(DriftguardError, ValueError):
    pass
