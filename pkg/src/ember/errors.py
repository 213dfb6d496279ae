"""Exception hierarchy shared by every ember module."""


class EmberError(Exception):
    """Base class for all errors raised by ember."""


class DimensionError(EmberError, ValueError):
    """Tensor or layer shapes do not line up."""


class ConfigurationError(EmberError, ValueError):
    """A model, library, or run was configured inconsistently."""


class PatternBoundsError(EmberError, ValueError):
    """More entries requested from a kernel than it holds."""


class TrainingError(EmberError, RuntimeError):
    """Training diverged or was asked to do something impossible."""

    def __init__(self, message, epoch=None, stage=None):
        super().__init__(message)
        self.epoch = epoch
        self.stage = stage


class ExportError(EmberError, ValueError):
    """A float model could not be represented in Q15."""


class ModelFormatError(EmberError, ValueError):
    """Base class for model-file decoding failures."""


class BadMagicError(ModelFormatError):
    pass


class VersionMismatchError(ModelFormatError):
    pass


class TruncatedModelError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class NvmCapacityError(EmberError, MemoryError):
    """Segments do not fit in the configured NVM capacity."""


class UnrecoverableStateError(EmberError, RuntimeError):
    """Neither progress slot holds a valid record.

    The A/B protocol makes this unreachable; seeing it means a bug.
    """


class CorruptProgressError(EmberError, RuntimeError):
    """A progress record's input index disagrees with its (L, O, W)."""


class TraceParameterError(EmberError, ValueError):
    """Invalid power-trace parameters."""


class PowerFailure(Exception):
    """Raised inside the simulated device when power drops mid-operation.

    Deliberately not an EmberError: it is control flow for the simulator,
    never an error surfaced to callers.
    """
