"""Exception types raised across the package."""


class WribError(Exception):
    pass


class ShapeMismatch(WribError, ValueError):
    pass


# data pipeline
class MissingDirectory(WribError, FileNotFoundError):
    pass


class EmptyDataset(WribError):
    pass


class ImageTooSmall(WribError, ValueError):
    pass


class InsufficientCandidates(WribError):
    pass


class BadImage(WribError, ValueError):
    pass


# bct / attention
class IndivisibleWidth(ShapeMismatch):
    pass


class PatchTooLarge(ShapeMismatch):
    pass


class ChannelMismatch(ShapeMismatch):
    pass


class EmptyKeys(WribError, ValueError):
    pass


# losses / adversarial
class InvalidWidth(WribError, ValueError):
    pass


class EmptyBatch(WribError, ValueError):
    pass


# training
class StageBatchMismatch(WribError, TypeError):
    pass


class MissingSRCheckpoint(WribError):
    pass


class BadCheckpoint(WribError):
    pass


class CorruptCheckpoint(BadCheckpoint):
    pass


class VersionMismatch(BadCheckpoint):
    pass


class ConfigError(WribError, ValueError):
    pass


class VersionMismatchWarning(UserWarning):
    """Checkpoint was written under a different config snapshot."""


# evaluation
class EmptyInput(WribError, ValueError):
    pass


class DegenerateInput(WribError, ValueError):
    pass


class SubsetTooLarge(WribError, ValueError):
    pass
