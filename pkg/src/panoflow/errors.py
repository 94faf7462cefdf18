"""Exception hierarchy shared across the toolkit."""


class PanoflowError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(PanoflowError):
    """Tensor or raster dimensions violate an operation's contract."""


class CheckpointError(PanoflowError):
    """A checkpoint entry is missing, malformed, or inconsistent."""


class DataError(PanoflowError):
    """An input file is missing or corrupt."""


class SchemaError(DataError):
    """A readable input file violates its documented schema."""


class ConfigError(PanoflowError):
    """A run configuration value is invalid."""
