"""Exception types shared across the package."""


class VimSvpError(Exception):
    """Base class for errors raised by this package."""


class DimensionError(VimSvpError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(VimSvpError, ValueError):
    """A precondition of an operation does not hold."""


class NonFiniteError(VimSvpError, FloatingPointError):
    """An operation produced NaN or Inf."""


class FormatError(VimSvpError, ValueError):
    """A file on disk does not match its expected layout."""


class CheckpointError(FormatError):
    """A checkpoint manifest or blob is inconsistent."""


class CorruptRecordError(FormatError):
    """A record inside an otherwise well-formed file holds an invalid value."""
