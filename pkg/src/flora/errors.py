"""Exception types shared across the package."""


class FloraError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FloraError, ValueError):
    """Operand shapes are incompatible, or a dimension is out of range."""


class NonFiniteError(FloraError, ValueError):
    """A tensor built from external input contains NaN or Inf."""


class HeterogeneousRankError(DimensionError):
    """Adapters batched together do not share one rank."""


class ArityError(FloraError, ValueError):
    """The number of per-example adapters does not match the batch size."""


class ConfigurationError(FloraError, ValueError):
    """A configuration is invalid or inconsistent."""


class CalibrationError(FloraError):
    """Cost coefficients cannot be fitted from the supplied timings."""


class DivergenceError(FloraError):
    """Training loss blew up; carries the loss trace collected so far."""

    def __init__(self, message, losses):
        super().__init__(message)
        self.losses = list(losses)


class StorageError(FloraError, OSError):
    """Reading or writing an adapter file failed at the OS level."""


class FormatError(FloraError, ValueError):
    """An adapter file is malformed.

    ``offset`` is the byte offset where the problem was detected, when known.
    """

    def __init__(self, message, offset=None, section=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset
        self.section = section


class TruncatedFileError(FormatError):
    """The file ends before a declared section is complete."""


class UnsupportedVersionError(FormatError):
    """The file declares a format version this reader cannot parse."""


class NonFinitePayloadError(FormatError):
    """The payload contains NaN or Inf."""


class AdapterNotFoundError(FloraError, KeyError):
    """No adapter is registered under the requested id."""
