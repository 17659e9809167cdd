"""Exception types shared across the toolkit.

The CLI maps these onto its exit-code contract: usage errors exit 2,
data/file errors exit 3, numeric failures exit 4.
"""


class SpikingResnetError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatchError(SpikingResnetError, ValueError):
    """Tensor dimensions disagree; names the offending axis."""

    def __init__(self, axis: str, expected, actual, context: str = ""):
        self.axis = axis
        self.expected = expected
        self.actual = actual
        where = f" in {context}" if context else ""
        super().__init__(
            f"dimension mismatch on axis '{axis}'{where}: "
            f"expected {expected}, got {actual}"
        )


class UnsupportedDepthError(SpikingResnetError, ValueError):
    """Requested network depth is not of the supported 6n+2 family."""


class DataError(SpikingResnetError):
    """Base for dataset / file-format problems (CLI exit 3)."""


class BadMagicError(DataError):
    """A binary file does not start with the expected magic number."""


class TruncatedFileError(DataError):
    """A binary file is shorter than its header or record size declares."""


class CountMismatchError(DataError):
    """Image and label counts (or similar paired counts) disagree."""


class ContainerError(DataError):
    """Base for model-container problems."""


class ContainerHeaderError(ContainerError):
    """Malformed or unrecognised model-container header."""


class ContainerTruncatedError(ContainerError):
    """Model-container blob is shorter than the header declares."""


class ContainerChecksumError(ContainerError):
    """Model-container blob does not match its recorded checksum."""


class NumericError(SpikingResnetError):
    """Base for numeric failures (CLI exit 4)."""


class TrainingDivergedError(NumericError):
    """Loss became non-finite during training."""

    def __init__(self, epoch: int, batch: int, loss):
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"training diverged: non-finite loss {loss!r} at epoch {epoch}, batch {batch}"
        )


class SilentLayerError(NumericError):
    """The deepest spiking layer never fired, so its rate statistics are undefined."""
