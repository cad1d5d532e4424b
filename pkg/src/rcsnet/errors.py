"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Tensor or parameter shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid model configuration (bad field, bad file, unknown key)."""


class StateError(RuntimeError):
    """Operation applied to a value in the wrong mode (e.g. double fusion)."""


class ImageFormatError(ValueError):
    """Unreadable or unsupported image file."""


class WeightFileError(ValueError):
    """Base class for weight-file load failures."""


class WeightMagicError(WeightFileError):
    """File does not start with the expected magic bytes."""


class WeightVersionError(WeightFileError):
    """Unsupported weight-file format version."""


class ManifestMismatchError(WeightFileError):
    """Stored array manifest disagrees with the model structure."""


class TruncatedWeightsError(WeightFileError):
    """Weight payload shorter than the manifest promises."""
