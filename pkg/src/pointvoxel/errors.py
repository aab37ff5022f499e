"""Exception types shared across the library.

Every error raised on purpose derives from PointVoxelError so callers can
catch library failures without swallowing programming mistakes.
"""


class PointVoxelError(Exception):
    """Base class for all library errors."""


class ShapeError(PointVoxelError, ValueError):
    """Tensor/array dimensions do not match an operation's contract."""


class ContractError(PointVoxelError, ValueError):
    """A documented precondition was violated (e.g. non-normalized input)."""


class ConfigError(PointVoxelError, ValueError):
    """A run or model configuration is malformed or inconsistent."""


class TrainingError(PointVoxelError, RuntimeError):
    """Training failed (NaN gradients/losses); carries the offending context."""


class InfeasibleConstraintError(PointVoxelError, RuntimeError):
    """No candidate satisfying the resource constraint could be sampled."""


class FileFormatError(PointVoxelError, IOError):
    """A serialized file has a bad magic, version, or is truncated."""


class LabelIndexError(PointVoxelError, IndexError):
    """A class label lies outside the valid range; names the offending row."""
