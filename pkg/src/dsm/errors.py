"""Common exception base for the dsm package.

Every structured error raised by dsm modules derives from DsmError so
callers (and the CLI exit-code mapping) can distinguish domain failures
from programming bugs.
"""


class DsmError(Exception):
    """Base class for all structured dsm errors."""


class InvariantViolation(DsmError):
    """A domain invariant does not hold; `field` names the offending field."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"invariant violated on '{field}'" + (f": {message}" if message else ""))


class MalformedDocument(DsmError):
    """Input bytes are not a parseable document."""


class SchemaViolation(DsmError):
    """Document parsed but does not match the strict schema; `path` locates the problem."""

    def __init__(self, path: str, message: str = ""):
        self.path = path
        super().__init__(f"schema violation at '{path}'" + (f": {message}" if message else ""))


class BadToken(DsmError):
    """A topic segment fails the token grammar; `position` names the segment."""

    def __init__(self, position: str, message: str = ""):
        self.position = position
        super().__init__(f"bad token at '{position}'" + (f": {message}" if message else ""))
