"""Exception hierarchy shared across the pipeline.

Every stage raises a subclass of SpixelError so the CLI can attribute
failures to a module and exit nonzero without a traceback.
"""


class SpixelError(Exception):
    """Base class for all pipeline errors."""


class FormatError(SpixelError):
    """A file does not match its declared binary/text format."""


class CorruptFileError(FormatError):
    """A file has a valid header but truncated or inconsistent payload."""


class ConsistencyError(SpixelError):
    """Two inputs that must agree (counts, shapes, alignment) do not."""


class StratificationError(SpixelError):
    """A class has too few members for the requested split."""


class ConfigError(SpixelError):
    """A configuration value is out of range or incoherent."""


class ShapeError(SpixelError):
    """Array shapes are incompatible with an operation."""


class EmptyGraphError(SpixelError):
    """A graph with zero nodes where at least one is required."""


class DegenerateBatchError(SpixelError):
    """Batch statistics are undefined (batch of one in train mode)."""


class DivergenceError(SpixelError):
    """A loss or gradient became non-finite during training."""


class CheckpointError(SpixelError):
    """A checkpoint does not match the data or architecture it is used with."""


class TapeError(SpixelError):
    """Misuse of the gradient tape (non-scalar loss, detached tensor)."""
