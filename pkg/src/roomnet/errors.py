"""Exception hierarchy shared by every roomnet subpackage."""


class RoomNetError(Exception):
    """Base class for all errors raised by roomnet."""


class InvalidArgumentError(RoomNetError, ValueError):
    pass


class CorruptedIndicesError(RoomNetError, IndexError):
    pass


class InvalidLayoutError(RoomNetError, ValueError):
    pass


class GenerationFailedError(RoomNetError, RuntimeError):
    pass


class DatasetLoadError(RoomNetError, OSError):
    pass


class ConfigError(RoomNetError, ValueError):
    pass


class CheckpointError(RoomNetError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
