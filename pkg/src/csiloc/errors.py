"""Exception hierarchy shared by every csiloc module.

The CLI maps these onto exit codes: configuration problems exit with 2,
data/format problems with 3 and numeric failures with 4.
"""


class CsilocError(Exception):
    """Base class for all library errors."""


class ConfigurationError(CsilocError, ValueError):
    """Invalid settings, infeasible architectures or shape chains."""


class DimensionError(CsilocError, ValueError):
    """A tensor arrived with the wrong shape."""


class StateError(CsilocError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DomainError(CsilocError, ValueError):
    """Inputs outside a metric's domain (empty sets, zero ranges)."""


class DataError(CsilocError):
    """Base for problems with files or dataset contents."""


class FormatError(DataError):
    """Malformed CSIT file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class ParseError(DataError):
    """Malformed text input (positions CSV, prediction CSV)."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(DataError):
    """Checkpoint manifest and tensor files disagree, or files are damaged."""


class CheckpointMismatchError(IntegrityError):
    """Checkpoint tensors do not fit the model they are loaded into."""

    def __init__(self, message: str, offending: list[str] | None = None):
        self.offending = list(offending or [])
        if self.offending:
            message = f"{message}: {', '.join(self.offending)}"
        super().__init__(message)


class NumericError(CsilocError, ArithmeticError):
    """Non-finite loss or gradient during training.

    ``checkpoint`` carries the last good checkpoint when one exists.
    """

    def __init__(self, message: str, checkpoint=None):
        self.checkpoint = checkpoint
        super().__init__(message)
