"""Shared exception types.

ConfigError marks bad configuration or usage (the CLI exits 1 for these);
every other exception is treated as a runtime failure (exit 2).
"""


class ConfigError(Exception):
    """Invalid configuration, option value, or incompatible shapes chosen by config."""


class DataError(Exception):
    """Corrupt or unusable input data (images, manifests, checkpoints)."""


class TrainingDiverged(Exception):
    """Loss became NaN or infinite; training was aborted."""
