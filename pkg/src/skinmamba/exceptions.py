"""Exception types shared across the package."""


class SkinMambaError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(SkinMambaError):
    """Raised when a configuration value is missing, unknown, or invalid."""


class NumericError(SkinMambaError):
    """Raised when a computation produces or receives non-finite values."""


class PairingError(SkinMambaError):
    """Raised when image/mask files under a dataset root cannot be paired."""


class CheckpointError(SkinMambaError):
    """Raised when a checkpoint archive is malformed or incompatible."""
