"""Attention-based multi-task learning for joint speech enhancement and speaker identification."""

from .errors import (
    AtmError,
    CheckpointError,
    CorruptCheckpointError,
    DataError,
    InvalidInputError,
    MetricError,
    UnsupportedVersionError,
    UsageError,
)

__version__ = "0.1.0"
