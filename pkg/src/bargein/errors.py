"""Exception types shared across the package.

The CLI maps these to exit codes: usage errors exit 1, data errors exit 2,
numerical failures exit 3.
"""


class DataError(ValueError):
    """Malformed or unusable input data (files, manifests, configs)."""


class AudioFormatError(DataError):
    """WAV file is not mono 16-bit PCM at 16 kHz."""


class ConfigError(DataError):
    """Experiment config fails schema validation."""


class ManifestError(DataError):
    """Dataset manifest is missing, truncated, or inconsistent."""


class ShortInputError(DataError):
    """Signal shorter than one analysis window."""


class ZeroEnergyError(DataError):
    """An operand that must carry energy is silent."""


class ColaError(ValueError):
    """Window/hop pair does not satisfy constant overlap-add."""


class NumericalError(RuntimeError):
    """Training or filtering produced non-finite values."""
