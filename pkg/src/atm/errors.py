"""Exception hierarchy shared by every atm module."""


class AtmError(Exception):
    pass


class InvalidInputError(AtmError, ValueError):
    """Argument has the wrong shape, range or content."""


class UsageError(AtmError):
    """API misuse: unknown option, wrong call order, bad configuration."""


class DataError(AtmError):
    """On-disk data is inconsistent, e.g. label/feature frame counts disagree."""


class MetricError(AtmError, ValueError):
    """Metric is undefined for the given input."""


class CheckpointError(AtmError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass
