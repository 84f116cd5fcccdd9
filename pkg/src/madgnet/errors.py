"""Exception hierarchy shared across the package."""


class MadgError(Exception):
    """Base class for all package errors."""


class DimensionError(MadgError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class ContractError(MadgError, ValueError):
    """A precondition on arguments (other than shapes) was violated."""


class ConfigError(MadgError, ValueError):
    """Invalid or inconsistent configuration."""


class StateError(MadgError, RuntimeError):
    """An object was used before it reached a usable state."""


class ParseError(MadgError, ValueError):
    """Malformed file contents.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(MadgError, RuntimeError):
    """Training diverged (non-finite loss) or could not proceed."""
