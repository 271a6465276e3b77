"""Exception hierarchy shared across the pipeline.

The CLI maps these onto exit codes: ConfigError -> 2, DataValidationError
subclasses -> 3, everything else raised from a run -> 4.
"""


class EndoscrubError(Exception):
    """Base class for all library errors."""


class ConfigError(EndoscrubError):
    """Invalid or inconsistent configuration."""


class DataValidationError(EndoscrubError):
    """Input data violates a documented invariant."""


# --- annotation / corpus ingestion ---

class MalformedRowError(DataValidationError):
    pass


class OverlapError(DataValidationError):
    pass


class GapError(DataValidationError):
    pass


class BoundsError(DataValidationError):
    pass


class DecodeError(DataValidationError):
    pass


class MissingTimestampError(DataValidationError):
    pass


class MissingFramesError(DataValidationError):
    pass


# --- splitting / sampling ---

class RatioError(ConfigError):
    pass


class EmptyCorpusError(DataValidationError):
    pass


class FractionError(ConfigError):
    pass


class EmptyDatasetError(DataValidationError):
    pass


# --- image ops ---

class TooSmallError(DataValidationError):
    pass


class ZeroStdError(ConfigError):
    pass


class NonSquareError(DataValidationError):
    pass


class EmptyBatchError(DataValidationError):
    pass


class ShapeMismatchError(DataValidationError):
    pass


# --- model / checkpoints ---

class WeightMismatchError(DataValidationError):
    pass


class VersionMismatchError(DataValidationError):
    pass


# --- metrics / timelines ---

class LengthMismatchError(DataValidationError):
    pass


class TooFewFoldsError(DataValidationError):
    pass


# --- scrubbing ---

class EvenWindowError(ConfigError):
    pass


class NonContiguousError(DataValidationError):
    pass


class NegativeMarginError(ConfigError):
    pass


class IntervalMismatchError(DataValidationError):
    pass
