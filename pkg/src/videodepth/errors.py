"""Exception hierarchy shared by every videodepth module."""


class VideoDepthError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(VideoDepthError, ValueError):
    """A caller violated an operation's precondition."""


class ShapeError(ContractError):
    """Tensor dimensions do not agree."""


class DegenerateInputError(ContractError):
    """Input is numerically degenerate (zero quaternion, rank-deficient system)."""


class GenerationError(VideoDepthError, RuntimeError):
    """A synthetic scene could not be generated or failed its audit."""


class NonFiniteError(VideoDepthError, FloatingPointError):
    """NaN or Inf appeared in a forward value or a training loss."""


class CheckpointError(VideoDepthError, OSError):
    """A checkpoint or tensor file is missing or malformed."""
