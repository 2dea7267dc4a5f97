"""Exception hierarchy shared across the package."""


class PoisonLabError(Exception):
    """Base class for all poisonlab errors."""


class ValidationError(PoisonLabError):
    """Invalid argument, config value, or violated precondition."""


class FolderStructureError(ValidationError):
    """Image folder does not follow the real/fake layout."""


class ImageDecodeError(PoisonLabError):
    """A file in an image folder could not be decoded."""

    def __init__(self, path, cause):
        super().__init__(f"cannot decode image {path}: {cause}")
        self.path = str(path)


class FormatError(PoisonLabError):
    """A persisted artifact file is malformed or fails its integrity check."""


class TrainingError(PoisonLabError):
    """Training diverged or a training callback failed."""


class NumericError(PoisonLabError):
    """Non-finite values where finite ones are required."""
