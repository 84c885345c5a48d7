"""Exception types mapped to CLI exit codes.

Exit-code table (stable for scripting):
    0  success
    2  invalid configuration
    3  missing prerequisite artifact (e.g. stage-2 without a stage-1 checkpoint)
    4  incompatible artifacts (checkpoint/bitstream/config-hash mismatch)
    5  corrupt bitstream
"""


class ConfigError(ValueError):
    exit_code = 2


class MissingPrerequisiteError(FileNotFoundError):
    exit_code = 3


class CompatibilityError(ValueError):
    exit_code = 4


class BitstreamError(ValueError):
    exit_code = 5


class FrozenCodebookError(RuntimeError):
    """Raised when a mutating update is attempted on a frozen codebook."""


class TrainingDivergedError(RuntimeError):
    """Raised when a loss becomes non-finite during training."""
