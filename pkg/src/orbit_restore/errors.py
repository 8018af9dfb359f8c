"""Exception hierarchy shared by every stage of the pipeline."""


class OrbitRestoreError(Exception):
    """Base class for all package errors."""


class NotFound(OrbitRestoreError, FileNotFoundError):
    pass


class DecodeError(OrbitRestoreError):
    pass


class IoError(OrbitRestoreError, OSError):
    pass


class ShapeError(OrbitRestoreError, ValueError):
    pass


class SizeError(OrbitRestoreError, ValueError):
    pass


class ParamError(OrbitRestoreError, ValueError):
    pass


class ConfigError(OrbitRestoreError, ValueError):
    """Malformed or unknown configuration keys."""


class EmptyDatasetError(OrbitRestoreError):
    pass


class SplitError(OrbitRestoreError):
    pass


class WeightsUnavailable(OrbitRestoreError):
    """Pretrained weights were requested but no archive could be found."""


class ArchiveError(OrbitRestoreError):
    """A weight archive is corrupt, truncated or otherwise unreadable."""


class ConfigMismatch(OrbitRestoreError):
    """A weight archive does not fit the model it is being loaded into."""
