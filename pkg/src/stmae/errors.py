"""Exception types shared across the package."""


class STMAEError(Exception):
    """Base class for all package errors."""


class ConfigError(STMAEError, ValueError):
    """A configuration value is missing, malformed or inconsistent."""


class InvalidInputError(STMAEError, ValueError):
    """Input data does not satisfy an operation's preconditions."""


class UndefinedMetricError(STMAEError, ValueError):
    """A metric is undefined for the given labels (e.g. only one class)."""


class CheckpointError(STMAEError):
    """A checkpoint file could not be read."""


class CheckpointVersionError(CheckpointError):
    def __init__(self, found, expected):
        super().__init__(f"checkpoint format version {found!r} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


class TrainingDivergedError(STMAEError, RuntimeError):
    """The training loss became non-finite."""
