"""Exception hierarchy shared by all fedcache modules."""


class FedCacheError(Exception):
    pass


class InvalidArgument(FedCacheError, ValueError):
    pass


class ConflictError(FedCacheError):
    """An id was inserted twice."""


class StateError(FedCacheError):
    """Operation not allowed in the current lifecycle state (e.g. cache frozen)."""


class NotFoundError(FedCacheError, KeyError):
    pass


class ParseError(FedCacheError):
    """Malformed input file. Carries the line number or byte offset."""

    def __init__(self, message: str, *, line: int | None = None, offset: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.line = line
        self.offset = offset


class FormatError(FedCacheError):
    """Well-formed records with inconsistent content (dimension or count mismatch)."""


class InvariantViolation(FedCacheError):
    """A runtime audit found a broken protocol invariant."""
