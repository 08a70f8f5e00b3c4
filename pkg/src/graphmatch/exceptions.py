"""Error taxonomy shared across the package.

Each exception carries a short machine-parsable ``code`` that the CLI
prints as a prefix on stderr before exiting nonzero.
"""


class GraphMatchError(Exception):
    """Base class for package errors."""

    code = "E_INTERNAL"


class ImageDecodeError(GraphMatchError):
    """A file could not be decoded as a raster image."""

    code = "E_DECODE"


class StoreParseError(GraphMatchError):
    """A graph store line failed to parse or validate."""

    code = "E_PARSE"


class CheckpointError(GraphMatchError):
    """A checkpoint is missing, truncated, or inconsistent."""

    code = "E_CHECKPOINT"


class TrainingError(GraphMatchError):
    """Training hit a non-recoverable state (non-finite loss, bad split)."""

    code = "E_TRAIN"


class MiningError(TrainingError):
    """Triplet mining is impossible for the given batch."""

    code = "E_MINING"


class MetricError(GraphMatchError):
    """A metric is undefined for the given inputs."""

    code = "E_METRIC"
