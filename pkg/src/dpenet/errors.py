"""Error kinds raised across the package.

Each class marks a distinct failure mode so callers (and the CLI) can map
them to exit codes without string matching.
"""


class ConfigError(ValueError):
    """A config value is invalid or unknown; message names the field path."""


class ShapeMismatchError(ValueError):
    """An input or parameter shape does not match a layer's spec."""


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class CheckpointNotFoundError(CheckpointError):
    """Checkpoint file does not exist."""


class CheckpointVersionError(CheckpointError):
    """File is not a checkpoint or uses an unsupported format version."""


class CheckpointManifestError(CheckpointError):
    """Tensor manifest is inconsistent with the payload."""


class CheckpointConfigError(CheckpointError):
    """Stored network config does not match the requested one."""


class DatasetError(Exception):
    """Dataset layout or image decoding failure; message names the file."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; message carries step diagnostics."""
