"""Exception types shared across the package.

Each failure mode the public API documents gets its own class so callers
(and tests) can distinguish a shape mismatch from, say, a malformed file.
"""


class LipformerError(Exception):
    """Base class for all package errors."""


class ShapeError(LipformerError):
    """Operand dimensions do not conform; message names the operands."""


class NumericError(LipformerError):
    """Non-finite values where finite ones are required."""


class ConfigError(LipformerError):
    """Invalid or inconsistent configuration value."""


class PreconditionError(LipformerError):
    """A documented precondition was violated (e.g. empty sequence)."""


class VocabError(LipformerError):
    """Token id outside the vocabulary."""


class AlignmentError(LipformerError):
    """Paired sequences that must be synchronous have different lengths."""


class FormatError(LipformerError):
    """A file or record does not parse; message carries location info."""


class GeometryError(LipformerError):
    """Degenerate geometry (e.g. coincident mouth corners)."""


class RenderError(LipformerError):
    """Rasterization input out of bounds."""


class OptimizerError(LipformerError):
    """Optimizer step impossible (e.g. missing gradient); names the parameter."""


class CheckpointError(LipformerError):
    """Checkpoint file invalid or incompatible with the config."""


class MetricError(LipformerError):
    """Metric undefined for the given reference (e.g. empty reference)."""


class DataError(LipformerError):
    """Corpus data inconsistent (e.g. unknown viseme token)."""
