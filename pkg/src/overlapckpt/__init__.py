"""Multi-step overlapped checkpointing with host-side AdamW replay."""

from overlapckpt.engine import (
    GradMode,
    Hyperparams,
    PhaseTiming,
    TrainingState,
    adamw_update,
    compute_gradient,
    init_state,
    train_step,
)
from overlapckpt.errors import (
    CheckpointAborted,
    CheckpointError,
    CorruptCheckpoint,
    IncompleteLedger,
    CheckpointNotFound,
    ProtocolViolation,
    StaleGradient,
    UnboundedInterval,
)

__version__ = "0.1.0"

__all__ = [
    "GradMode",
    "Hyperparams",
    "PhaseTiming",
    "TrainingState",
    "adamw_update",
    "compute_gradient",
    "init_state",
    "train_step",
    "CheckpointAborted",
    "CheckpointError",
    "CorruptCheckpoint",
    "IncompleteLedger",
    "CheckpointNotFound",
    "ProtocolViolation",
    "StaleGradient",
    "UnboundedInterval",
]
