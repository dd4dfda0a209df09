"""Exception types shared across the toolkit.

ConfigError maps to CLI exit code 2, everything else to exit code 1.
"""


class ConfigError(Exception):
    """Invalid configuration: bad hyperparameters, unknown keys, unresolvable layers."""


class InputError(ValueError):
    """Malformed runtime inputs (shape mismatches, NaNs, out-of-range pixels)."""


class DataError(Exception):
    """Unusable dataset or guide pool (empty after filtering, unreadable manifest)."""


class StateError(RuntimeError):
    """Operation attempted in the wrong lifecycle state (e.g. missing weights)."""


class VersionError(Exception):
    """Checkpoint schema mismatch or corrupted archive; nothing was loaded."""
