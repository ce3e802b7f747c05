"""Exception hierarchy shared by all kmerge modules."""


class KMergeError(Exception):
    """Base class for all errors raised by this package."""


class KeyNotFound(KMergeError):
    """A requested (layer, projection) key is absent from an adapter."""


class ShapeError(KMergeError):
    """Tensor dimensions are inconsistent with the declared rank or widths."""


class FormatError(KMergeError):
    """An adapter file is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleAdapters(KMergeError):
    """Two adapters do not share the same layer key-set or layer widths."""


class EmptyStore(KMergeError):
    """An operation requiring at least one occupied slot found none."""


class InsufficientData(KMergeError):
    """Threshold calibration needs at least two held-out adapters."""


class InvalidHistoryCount(KMergeError):
    """Running-average merge called with a non-positive history count."""


class InsufficientInputs(KMergeError):
    """A multi-input merge operator received fewer than two inputs."""


class UnsupportedMode(KMergeError):
    """A rank policy mode is not applicable to the given input."""


class DuplicateTask(KMergeError):
    """A task id was delivered to the store more than once."""


class UnknownTask(KMergeError):
    """Routing was asked for a task that was never ingested."""


class SlotVacant(KMergeError):
    """A storage slot key does not refer to an occupied slot."""


class RestoreError(KMergeError):
    """A persisted store directory is missing files or has a bad manifest."""


class ConfigError(KMergeError):
    """A generator or policy configuration is infeasible."""
