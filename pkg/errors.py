"""Exception hierarchy shared by every module of the packing engine."""


class PackingError(Exception):
    """Base class for all errors raised by the packing engine."""


class DimensionError(PackingError, ValueError):
    """Tensor or mask shapes do not agree."""


class InputError(PackingError, ValueError):
    """An argument is outside its allowed range."""


class UsageError(PackingError, TypeError):
    """An API was called in a way it does not support."""


class TaskLookupError(PackingError, LookupError):
    """A task id is not registered on the network."""


class StateError(PackingError, RuntimeError):
    """A lifecycle operation was called out of order."""


class CapacityError(PackingError):
    """No free parameters remain for a new task."""


class InvariantViolation(PackingError):
    """A packing invariant was broken."""


class OwnershipViolation(InvariantViolation):
    """An operation tried to modify a parameter owned by a task."""


class ZeroForgettingError(InvariantViolation):
    """A frozen task's outputs changed after a later task was added."""


class FormatError(PackingError, ValueError):
    """A serialized mask or checkpoint is corrupt or unsupported."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ReportIOError(PackingError, OSError):
    """A report or checkpoint could not be written."""
