"""Error hierarchy shared by every module.

Exceptions double as the CLI's exit-code map: anything under
ValidationError exits 1, TransportError exits 2, everything else that
escapes is internal and exits 3.
"""

from __future__ import annotations


class QtodError(Exception):
    """Base class for errors raised by this package."""

    exit_code = 3


class ValidationError(QtodError):
    """Bad input: schema violations, invariant breaks, bad config."""

    exit_code = 1


class SchemaError(ValidationError):
    """A file or payload failed to parse under its declared schema."""


class ContractViolation(ValidationError):
    """A caller broke an operation's precondition."""


class CapacityError(ValidationError):
    """A sampling pool cannot satisfy the requested size."""

    def __init__(self, message: str, shortfall: int = 0):
        super().__init__(message)
        self.shortfall = shortfall


class BackendError(QtodError):
    """A generation backend failed; carries the pipeline stage when known."""

    def __init__(self, message: str, stage: str | None = None):
        super().__init__(message)
        self.stage = stage


class TransportError(BackendError):
    """The remote backend was unreachable or timed out."""

    exit_code = 2


class ServerError(BackendError):
    """The remote backend answered with an error status."""
