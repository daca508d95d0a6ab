"""Exception types raised across the package."""


class ChronomergeError(Exception):
    """Base class for all chronomerge errors."""


class StructureMismatch(ChronomergeError, ValueError):
    """Two checkpoints do not share the same tensor structure."""


class KeyMismatch(StructureMismatch):
    """Tensor name sets differ."""


class ShapeMismatch(StructureMismatch):
    """A tensor exists under the same name but with a different shape."""


class FormatError(ChronomergeError, ValueError):
    """A checkpoint file is corrupt or not in the expected format."""


class EmptyInput(ChronomergeError, ValueError):
    """An operation that needs at least one candidate received none."""


class WeightMismatch(ChronomergeError, ValueError):
    """A weight vector does not match the candidate list."""


class ZeroTaskVector(ChronomergeError, ValueError):
    """A task vector is (numerically) zero where a direction is required."""


class InvalidProbability(ChronomergeError, ValueError):
    """A probability parameter is outside its valid range."""


class InvalidThresholds(ChronomergeError, ValueError):
    """Tail-trimming thresholds are outside their valid range."""


class ArityError(ChronomergeError, ValueError):
    """A pairwise-only technique received the wrong number of candidates."""


class InvalidCount(ChronomergeError, ValueError):
    """A count parameter is outside its valid range."""


class EmptyBuffer(ChronomergeError, ValueError):
    """The expert buffer is empty where at least one entry is required."""


class DivergenceError(ChronomergeError, RuntimeError):
    """Training produced a non-finite loss."""


class InvalidDimensions(ChronomergeError, ValueError):
    """Benchmark dimensions are inconsistent or out of range."""


class EmptyDataset(ChronomergeError, ValueError):
    """A dataset with zero samples was passed where samples are required."""


class EmptyHoldout(ChronomergeError, ValueError):
    """The benchmark has no holdout tasks."""


class ConfigError(ChronomergeError, ValueError):
    """An experiment configuration is invalid."""
