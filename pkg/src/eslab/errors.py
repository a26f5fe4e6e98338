"""Exception hierarchy shared across the package."""


class ESLabError(Exception):
    """Base class for every error raised by eslab."""


class DimensionError(ESLabError, ValueError):
    """Tensor or layer shapes are incompatible."""


class DomainError(ESLabError, ValueError):
    """A value lies outside the domain an operation accepts."""


class UsageError(ESLabError, RuntimeError):
    """An API was called in an invalid state."""


class BuildError(ESLabError, ValueError):
    """A layer table could not be assembled into a network."""


class CheckpointError(ESLabError):
    """Base class for checkpoint and dataset file problems."""


class CorruptFileError(CheckpointError):
    """File is truncated or its header is malformed."""


class VersionMismatchError(CheckpointError):
    """File was written by an incompatible format version."""


class ShapeMismatchError(CheckpointError, DimensionError):
    """Stored parameters do not match the expected architecture."""


class OracleError(ESLabError):
    """Base class for query-oracle failures."""


class BudgetExhaustedError(OracleError):
    """The query budget cannot cover the requested batch."""


class BadRequestError(OracleError):
    """A request to the oracle service was malformed."""


class SynthesisError(ESLabError):
    """Data synthesis produced a non-finite loss."""


class TrainingError(ESLabError):
    """Training diverged (non-finite loss)."""


class ConfigError(ESLabError, ValueError):
    """Experiment configuration is invalid."""
