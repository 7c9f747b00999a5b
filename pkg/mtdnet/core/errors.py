"""
Exceptions raised by the MTDnet engine.

All of them derive from ``ValueError`` or ``RuntimeError`` so callers that only
care about "bad input" versus "failed run" can catch the builtin types.
"""


class ShapeError(ValueError):
    """Tensor shapes or layer geometry do not agree."""


class ConfigError(ValueError):
    """A configuration value or config file is invalid."""


class DatasetError(ValueError):
    """A dataset, image file or split cannot be used as requested."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the network."""


class TrainingDivergedError(RuntimeError):
    """The training loss became NaN or infinite."""
