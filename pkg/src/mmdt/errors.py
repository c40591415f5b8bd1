"""Exception types raised across the toolkit."""


class MMDTError(Exception):
    """Base class for all toolkit errors."""


class IngestError(MMDTError):
    pass


class PatchError(MMDTError):
    pass


class ParamError(MMDTError, ValueError):
    pass


class SplitError(MMDTError, ValueError):
    pass


class ShapeError(MMDTError, ValueError):
    pass


class BatchError(MMDTError, ValueError):
    pass


class NumericError(MMDTError, ArithmeticError):
    """Non-finite value encountered. ``checkpoint`` names the last good archive, if any."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class StateError(MMDTError):
    pass


class VoteError(MMDTError, ValueError):
    pass


class MetricError(MMDTError, ValueError):
    pass


class CorruptArchiveError(MMDTError):
    """Malformed checkpoint archive; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class TraceError(MMDTError):
    """Trace computation failed; the message names the patches involved."""
