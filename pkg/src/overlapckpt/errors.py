"""Exception types shared across the package."""


class ProtocolViolation(RuntimeError):
    """A call arrived in a state that the calling protocol forbids."""


class StaleGradient(ValueError):
    """The gradient does not drive the next update of the state."""


class CheckpointError(Exception):
    pass


class CheckpointAborted(CheckpointError):
    """The snapshot session was discarded; training continues without it."""


class IncompleteLedger(CheckpointError):
    """A staged part is missing a gradient slice it needs for replay."""


class CorruptCheckpoint(CheckpointError):
    pass


class CheckpointNotFound(CheckpointError, FileNotFoundError):
    pass


class CheckpointWriteError(CheckpointError):
    """Persisting failed; the partial checkpoint was removed."""


class UnboundedInterval(ValueError):
    """No finite optimal interval exists (failure rate is zero)."""
