"""Exception hierarchy. ``exit_code`` groups errors into the CLI's families."""


class GlstmError(Exception):
    exit_code = 1


class BadInputError(GlstmError):
    exit_code = 2


class NumericError(GlstmError):
    exit_code = 3


class StorageError(GlstmError):
    exit_code = 4


class ShapeError(BadInputError, ValueError):
    pass


class DecompositionError(NumericError):
    pass


class DivergenceError(NumericError):
    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged (non-finite loss) in epoch {epoch}")


class ConfigError(BadInputError):
    pass


# dataset ingestion

class ManifestError(BadInputError):
    def __init__(self, message: str, item_id=None):
        self.item_id = item_id
        if item_id is not None:
            message = f"item {item_id!r}: {message}"
        super().__init__(message)


class MalformedManifestError(ManifestError):
    pass


class DimensionMismatchError(ManifestError):
    pass


class MissingFileError(ManifestError, StorageError):
    exit_code = 4


# binary containers

class ContainerError(BadInputError):
    pass


class VersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class StaleCacheError(BadInputError):
    pass
