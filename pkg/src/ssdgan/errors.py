"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor dimensions do not satisfy an operation's geometry contract."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class TrainingDiverged(RuntimeError):
    """A non-finite loss or gradient was encountered; the run is aborted."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported by this reader."""


class CheckpointIntegrityError(CheckpointError):
    """Checkpoint payload is truncated or does not match its manifest."""
