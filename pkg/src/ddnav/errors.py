"""Exception hierarchy shared across the package."""

from __future__ import annotations


class DDNavError(Exception):
    """Base class for every domain error raised by ddnav."""


class ConfigError(DDNavError):
    pass


class ParseError(DDNavError):
    """Malformed input: scene/ontology files or reasoner replies."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class UnknownObject(DDNavError):
    pass


class Unreachable(DDNavError):
    pass


class NoPath(Unreachable):
    pass


class UnknownDemand(DDNavError):
    pass


class ValidationError(DDNavError):
    pass


class StorageError(DDNavError):
    pass


class EmptyKnowledgeBase(DDNavError):
    pass


class EmptySet(DDNavError):
    pass


class MissingBinding(DDNavError):
    pass


class BackendError(DDNavError):
    """Transport failure talking to a remote reasoner, after retries."""


class AuthError(BackendError):
    pass
