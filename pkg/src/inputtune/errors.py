"""Exception types raised across the package."""


class InputTuneError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(InputTuneError, ValueError):
    pass


class NonDivisibleSplit(InputTuneError, ValueError):
    pass


class EmptyDataset(InputTuneError, ValueError):
    pass


class LabelSpaceMismatch(InputTuneError, ValueError):
    pass


class UnknownBlockNames(InputTuneError, KeyError):
    pass


class UnknownGroup(InputTuneError, KeyError):
    pass


class MissingTransform(InputTuneError, LookupError):
    pass


class InsertionPointUnavailable(InputTuneError, ValueError):
    pass


class UnregisteredSession(InputTuneError, LookupError):
    pass


class NoTrainedSessions(InputTuneError, RuntimeError):
    pass


class NoTeacher(InputTuneError, RuntimeError):
    pass


class OutOfOrderSession(InputTuneError, RuntimeError):
    pass


class IncompatibleStrategy(InputTuneError, ValueError):
    pass


class IncompleteMatrix(InputTuneError, ValueError):
    pass


class IncompleteRow(IncompleteMatrix):
    pass


class ConfigInvalid(InputTuneError, ValueError):
    pass


class CheckpointMissing(InputTuneError, FileNotFoundError):
    pass


class MissingMatrix(InputTuneError, FileNotFoundError):
    pass
